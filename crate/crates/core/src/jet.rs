//! Truncated multivariate Taylor expansions ("jets") around a base point.
//!
//! A [`Jet`] stores the coefficients of a polynomial in the tangential
//! offsets `xi_1, ..., xi_dim`, truncated at a fixed total degree. The
//! coefficient of the monomial `xi^beta` is stored directly (monomial
//! normalization): the value of the underlying derivative is
//! `beta! * coeff(beta)`. Storage is dense over all multi-indices of total
//! degree `<= order`, in graded lexicographic order.
//!
//! Arithmetic is exact on the retained degrees: products discard terms whose
//! total degree would exceed the truncation order, and differentiation
//! lowers the order by one because the top degree of the derivative is no
//! longer trustworthy.

use crate::coeff::Coeff;
use crate::error::{CmcError, Result};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Sentinel in the product-position table for "exceeds the truncation order".
const NO_SLOT: u32 = u32::MAX;

/// Shared per-(dim, order) description of the dense monomial layout.
#[derive(Debug)]
struct Layout {
    dim: usize,
    order: usize,
    /// Multi-indices in graded-lex order (degree first, then lexicographic).
    exponents: Vec<Vec<u32>>,
    /// Start offset of each total-degree band; `degree_start[d]..degree_start[d+1]`.
    degree_start: Vec<usize>,
    /// Position lookup for a multi-index.
    position: HashMap<Vec<u32>, usize>,
    /// Flattened `len x len` table: position of `beta_p + beta_q`, or `NO_SLOT`.
    product: Vec<u32>,
}

impl Layout {
    fn len(&self) -> usize {
        self.exponents.len()
    }

    fn band(&self, degree: usize) -> std::ops::Range<usize> {
        self.degree_start[degree]..self.degree_start[degree + 1]
    }
}

fn compositions(dim: usize, degree: u32, out: &mut Vec<Vec<u32>>) {
    // All `dim`-tuples of nonnegative integers summing to `degree`,
    // in lexicographic order.
    fn rec(prefix: &mut Vec<u32>, remaining_slots: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
        if remaining_slots == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in 0..=remaining {
            prefix.push(v);
            rec(prefix, remaining_slots - 1, remaining - v, out);
            prefix.pop();
        }
    }
    if dim == 0 {
        if degree == 0 {
            out.push(Vec::new());
        }
        return;
    }
    rec(&mut Vec::with_capacity(dim), dim, degree, out);
}

fn build_layout(dim: usize, order: usize) -> Layout {
    let mut exponents = Vec::new();
    let mut degree_start = Vec::with_capacity(order + 2);
    for d in 0..=order {
        degree_start.push(exponents.len());
        compositions(dim, d as u32, &mut exponents);
    }
    degree_start.push(exponents.len());

    let mut position = HashMap::with_capacity(exponents.len());
    for (p, beta) in exponents.iter().enumerate() {
        position.insert(beta.clone(), p);
    }

    let len = exponents.len();
    let mut product = vec![NO_SLOT; len * len];
    let mut sum = vec![0u32; dim];
    for p in 0..len {
        for q in 0..len {
            let total: u32 = exponents[p].iter().zip(&exponents[q]).map(|(a, b)| a + b).sum();
            if total as usize <= order {
                for a in 0..dim {
                    sum[a] = exponents[p][a] + exponents[q][a];
                }
                product[p * len + q] = position[&sum[..].to_vec()] as u32;
            }
        }
    }

    Layout { dim, order, exponents, degree_start, position, product }
}

fn layout(dim: usize, order: usize) -> Arc<Layout> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Layout>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("layout cache poisoned");
    guard
        .entry((dim, order))
        .or_insert_with(|| Arc::new(build_layout(dim, order)))
        .clone()
}

/// Truncated Taylor expansion in `dim` tangential variables.
#[derive(Clone)]
pub struct Jet<C: Coeff = f64> {
    layout: Arc<Layout>,
    coeffs: Vec<C>,
}

impl<C: Coeff> PartialEq for Jet<C> {
    fn eq(&self, other: &Self) -> bool {
        self.dim() == other.dim() && self.order() == other.order() && self.coeffs == other.coeffs
    }
}

impl<C: Coeff> std::fmt::Debug for Jet<C> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Jet")
            .field("dim", &self.dim())
            .field("order", &self.order())
            .field("coeffs", &self.coeffs)
            .finish()
    }
}

impl<C: Coeff> Jet<C> {
    /// The zero jet.
    pub fn zero(dim: usize, order: usize) -> Self {
        let layout = layout(dim, order);
        let coeffs = vec![C::zero(); layout.len()];
        Jet { layout, coeffs }
    }

    /// A constant jet with the given value.
    pub fn constant(dim: usize, order: usize, value: C) -> Self {
        let mut jet = Self::zero(dim, order);
        jet.coeffs[0] = value;
        jet
    }

    /// The coordinate jet `base + xi_axis`.
    pub fn variable(dim: usize, order: usize, axis: usize, base: C) -> Self {
        assert!(axis < dim, "variable axis {axis} out of range for dim {dim}");
        let mut jet = Self::constant(dim, order, base);
        if order >= 1 {
            let mut beta = vec![0u32; dim];
            beta[axis] = 1;
            let pos = jet.layout.position[&beta];
            jet.coeffs[pos] = C::one();
        }
        jet
    }

    /// Build a jet from a dense coefficient vector in graded-lex order.
    pub fn from_coeffs(dim: usize, order: usize, coeffs: Vec<C>) -> Result<Self> {
        let layout = layout(dim, order);
        if coeffs.len() != layout.len() {
            return Err(CmcError::Shape(format!(
                "jet with dim {dim}, order {order} needs {} coefficients, got {}",
                layout.len(),
                coeffs.len()
            )));
        }
        Ok(Jet { layout, coeffs })
    }

    /// Number of tangential variables.
    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    /// Truncation order (maximum retained total degree).
    pub fn order(&self) -> usize {
        self.layout.order
    }

    /// Dense coefficients in graded-lex order.
    pub fn coeffs(&self) -> &[C] {
        &self.coeffs
    }

    /// Multi-indices in storage order (graded-lex).
    pub fn exponents(&self) -> impl Iterator<Item = &[u32]> {
        self.layout.exponents.iter().map(|e| e.as_slice())
    }

    /// Coefficient of the monomial `xi^beta`, or `None` if `beta` is not a
    /// valid multi-index for this shape.
    pub fn coeff(&self, beta: &[u32]) -> Option<&C> {
        if beta.len() != self.dim() {
            return None;
        }
        self.layout.position.get(beta).map(|&p| &self.coeffs[p])
    }

    /// Set the coefficient of `xi^beta`.
    pub fn set_coeff(&mut self, beta: &[u32], value: C) -> Result<()> {
        if beta.len() != self.dim() {
            return Err(CmcError::Shape(format!(
                "multi-index length {} does not match jet dim {}",
                beta.len(),
                self.dim()
            )));
        }
        match self.layout.position.get(beta) {
            Some(&p) => {
                self.coeffs[p] = value;
                Ok(())
            }
            None => Err(CmcError::Shape(format!(
                "multi-index {beta:?} exceeds jet order {}",
                self.order()
            ))),
        }
    }

    /// Value at the base point (coefficient of the empty monomial).
    pub fn constant_term(&self) -> &C {
        &self.coeffs[0]
    }

    /// True when every stored coefficient is zero.
    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_zero())
    }

    /// Largest coefficient magnitude (diagnostic norm).
    pub fn sup_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.to_f64().abs()).fold(0.0, f64::max)
    }

    fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.dim() != other.dim() || self.order() != other.order() {
            return Err(CmcError::Shape(format!(
                "{what}: jet shapes differ (dim {} order {} vs dim {} order {})",
                self.dim(),
                self.order(),
                other.dim(),
                other.order()
            )));
        }
        Ok(())
    }

    /// Coefficient-wise sum. Shapes must match exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a.clone() + b.clone())
            .collect();
        Ok(Jet { layout: self.layout.clone(), coeffs })
    }

    /// Coefficient-wise difference. Shapes must match exactly.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a.clone() - b.clone())
            .collect();
        Ok(Jet { layout: self.layout.clone(), coeffs })
    }

    /// Truncated product: terms of total degree above the order are dropped.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "mul")?;
        let len = self.layout.len();
        let mut out = vec![C::zero(); len];
        for p in 0..len {
            if self.coeffs[p].is_zero() {
                continue;
            }
            let row = &self.layout.product[p * len..(p + 1) * len];
            for q in 0..len {
                let slot = row[q];
                if slot == NO_SLOT || other.coeffs[q].is_zero() {
                    continue;
                }
                let term = self.coeffs[p].clone() * other.coeffs[q].clone();
                let s = slot as usize;
                out[s] = out[s].clone() + term;
            }
        }
        Ok(Jet { layout: self.layout.clone(), coeffs: out })
    }

    /// Multiply every coefficient by a scalar.
    pub fn scale(&self, k: &C) -> Self {
        let coeffs = self.coeffs.iter().map(|c| c.clone() * k.clone()).collect();
        Jet { layout: self.layout.clone(), coeffs }
    }

    /// Negation.
    pub fn neg(&self) -> Self {
        let coeffs = self.coeffs.iter().map(|c| -c.clone()).collect();
        Jet { layout: self.layout.clone(), coeffs }
    }

    /// Multiplicative inverse in the truncated ring. The constant term must
    /// be nonzero.
    pub fn recip(&self) -> Result<Self> {
        let c0 = self.constant_term().clone();
        if c0.is_zero() {
            return Err(CmcError::Singular(
                "jet reciprocal: constant term is zero".to_string(),
            ));
        }
        let mut r = Self::constant(self.dim(), self.order(), C::one() / c0.clone());
        let one = Self::constant(self.dim(), self.order(), C::one());
        for d in 1..=self.order() {
            // Refine degree band d: with r exact below degree d, the residual
            // e = 1 - a*r at degree d satisfies r_new = r_old + e/c0 there.
            let e = one.sub(&self.mul(&r)?)?;
            for p in self.layout.band(d) {
                r.coeffs[p] = r.coeffs[p].clone() + e.coeffs[p].clone() / c0.clone();
            }
        }
        Ok(r)
    }

    /// Square root in the truncated ring (positive branch). The constant term
    /// must admit a square root in the coefficient field.
    pub fn sqrt(&self) -> Result<Self> {
        let c0 = self.constant_term();
        let s0 = c0.sqrt().map_err(|e| {
            CmcError::Singular(format!(
                "jet sqrt: constant term {c0:?} has no square root in this field ({e:?})"
            ))
        })?;
        let two_s0 = C::from_i64(2) * s0.clone();
        let mut s = Self::constant(self.dim(), self.order(), s0);
        for d in 1..=self.order() {
            // Same band-refinement scheme as `recip`, for e = a - s*s.
            let e = self.sub(&s.mul(&s)?)?;
            for p in self.layout.band(d) {
                s.coeffs[p] = s.coeffs[p].clone() + e.coeffs[p].clone() / two_s0.clone();
            }
        }
        Ok(s)
    }

    /// Partial derivative along a tangential axis. The result's order drops
    /// by one because the top-degree information is no longer complete.
    ///
    /// Requires `order >= 1`: an order-0 jet holds no derivative information
    /// at all, so differentiating it would fabricate a zero.
    pub fn diff(&self, axis: usize) -> Self {
        assert!(axis < self.dim(), "diff axis {axis} out of range for dim {}", self.dim());
        assert!(self.order() >= 1, "cannot differentiate an order-0 jet");
        let mut out = Self::zero(self.dim(), self.order() - 1);
        let mut beta = vec![0u32; self.dim()];
        for (p, exps) in self.layout.exponents.iter().enumerate() {
            let k = exps[axis];
            if k == 0 || self.coeffs[p].is_zero() {
                continue;
            }
            beta.copy_from_slice(exps);
            beta[axis] -= 1;
            let pos = out.layout.position[&beta];
            out.coeffs[pos] =
                out.coeffs[pos].clone() + C::from_i64(k as i64) * self.coeffs[p].clone();
        }
        out
    }

    /// Copy with a different truncation order: lower orders drop
    /// coefficients, higher orders pad with zeros (which asserts that the
    /// padded degrees are genuinely zero — callers must ensure that).
    pub fn resized(&self, new_order: usize) -> Self {
        if new_order == self.order() {
            return self.clone();
        }
        let mut out = Self::zero(self.dim(), new_order);
        let keep = self.layout.degree_start[self.order().min(new_order) + 1];
        out.coeffs[..keep].clone_from_slice(&self.coeffs[..keep]);
        out
    }

    /// Evaluate the truncated polynomial at a tangential offset from the
    /// base point.
    pub fn eval(&self, offset: &[C]) -> Result<C> {
        if offset.len() != self.dim() {
            return Err(CmcError::Shape(format!(
                "eval offset has {} components, jet dim is {}",
                offset.len(),
                self.dim()
            )));
        }
        // Precompute per-axis powers up to the order.
        let powers: Vec<Vec<C>> = offset
            .iter()
            .map(|x| {
                let mut pw = Vec::with_capacity(self.order() + 1);
                pw.push(C::one());
                for _ in 0..self.order() {
                    pw.push(pw.last().expect("nonempty").clone() * x.clone());
                }
                pw
            })
            .collect();
        let mut total = C::zero();
        for (p, exps) in self.layout.exponents.iter().enumerate() {
            if self.coeffs[p].is_zero() {
                continue;
            }
            let mut term = self.coeffs[p].clone();
            for (a, &e) in exps.iter().enumerate() {
                if e > 0 {
                    term = term * powers[a][e as usize].clone();
                }
            }
            total = total + term;
        }
        Ok(total)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JetRepr<C> {
    dim: usize,
    order: usize,
    coeffs: Vec<C>,
}

impl<C: Coeff + Serialize> Serialize for Jet<C> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        JetRepr { dim: self.dim(), order: self.order(), coeffs: self.coeffs.clone() }
            .serialize(serializer)
    }
}

impl<'de, C: Coeff + Deserialize<'de>> Deserialize<'de> for Jet<C> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = JetRepr::<C>::deserialize(deserializer)?;
        Jet::from_coeffs(repr.dim, repr.order, repr.coeffs).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample(dim: usize, order: usize, seed: u64) -> Jet<f64> {
        // Deterministic pseudo-random coefficients in [-1, 1].
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 2_000_000) as f64 / 1_000_000.0 - 1.0
        };
        let len = layout(dim, order).len();
        Jet::from_coeffs(dim, order, (0..len).map(|_| next()).collect()).expect("shape")
    }

    fn max_diff(a: &Jet<f64>, b: &Jet<f64>) -> f64 {
        a.coeffs()
            .iter()
            .zip(b.coeffs())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn layout_is_graded_lex() {
        let jet = Jet::<f64>::zero(2, 2);
        let exps: Vec<Vec<u32>> = jet.exponents().map(|e| e.to_vec()).collect();
        assert_eq!(
            exps,
            vec![
                vec![0, 0],
                vec![0, 1],
                vec![1, 0],
                vec![0, 2],
                vec![1, 1],
                vec![2, 0]
            ]
        );
    }

    #[test]
    fn ring_laws_hold_to_tolerance() {
        for seed in 0..5u64 {
            let a = sample(2, 6, seed);
            let b = sample(2, 6, seed + 100);
            let c = sample(2, 6, seed + 200);
            // Commutativity and associativity of the truncated product.
            let ab = a.mul(&b).unwrap();
            let ba = b.mul(&a).unwrap();
            assert!(max_diff(&ab, &ba) < 1e-12);
            let abc1 = ab.mul(&c).unwrap();
            let abc2 = a.mul(&b.mul(&c).unwrap()).unwrap();
            assert!(max_diff(&abc1, &abc2) < 1e-12);
            // Distributivity.
            let lhs = a.mul(&b.add(&c).unwrap()).unwrap();
            let rhs = a.mul(&b).unwrap().add(&a.mul(&c).unwrap()).unwrap();
            assert!(max_diff(&lhs, &rhs) < 1e-12);
        }
    }

    #[test]
    fn product_matches_leibniz() {
        let a = sample(2, 6, 7);
        let b = sample(2, 6, 8);
        let prod = a.mul(&b).unwrap();
        for axis in 0..2 {
            let lhs = prod.diff(axis);
            let rhs = a
                .diff(axis)
                .mul(&b.resized(5))
                .unwrap()
                .add(&a.resized(5).mul(&b.diff(axis)).unwrap())
                .unwrap();
            assert!(max_diff(&lhs, &rhs) < 1e-12);
        }
    }

    #[test]
    fn truncation_commutes_with_product() {
        let a = sample(3, 5, 21);
        let b = sample(3, 5, 22);
        // Truncating inputs then multiplying equals multiplying then truncating.
        let low = a.resized(3).mul(&b.resized(3)).unwrap();
        let high = a.mul(&b).unwrap().resized(3);
        assert!(max_diff(&low, &high) < 1e-12);
    }

    #[test]
    fn recip_round_trips() {
        let mut a = sample(2, 8, 3);
        a.set_coeff(&[0, 0], 1.7).unwrap();
        let r = a.recip().unwrap();
        let prod = a.mul(&r).unwrap();
        let one = Jet::constant(2, 8, 1.0);
        assert!(max_diff(&prod, &one) < 1e-12);
    }

    #[test]
    fn recip_rejects_zero_constant() {
        let mut a = sample(2, 4, 3);
        a.set_coeff(&[0, 0], 0.0).unwrap();
        assert!(matches!(a.recip(), Err(CmcError::Singular(_))));
    }

    #[test]
    fn sqrt_round_trips() {
        let mut a = sample(2, 8, 11);
        a.set_coeff(&[0, 0], 2.5).unwrap();
        let s = a.sqrt().unwrap();
        let sq = s.mul(&s).unwrap();
        assert!(max_diff(&sq, &a) < 1e-12);
        // sqrt and recip commute: 1/sqrt(a) == sqrt(1/a).
        let lhs = s.recip().unwrap();
        let rhs = a.recip().unwrap().sqrt().unwrap();
        assert!(max_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn diff_reduces_order_and_matches_hand_computation() {
        // p = 1 + 2 xi1 + 3 xi2^2 + 4 xi1 xi2 at order 2, dim 2.
        let mut p = Jet::zero(2, 2);
        p.set_coeff(&[0, 0], 1.0).unwrap();
        p.set_coeff(&[1, 0], 2.0).unwrap();
        p.set_coeff(&[0, 2], 3.0).unwrap();
        p.set_coeff(&[1, 1], 4.0).unwrap();
        let dx1 = p.diff(0);
        assert_eq!(dx1.order(), 1);
        assert_abs_diff_eq!(*dx1.coeff(&[0, 0]).unwrap(), 2.0);
        assert_abs_diff_eq!(*dx1.coeff(&[0, 1]).unwrap(), 4.0);
        let dx2 = p.diff(1);
        assert_abs_diff_eq!(*dx2.coeff(&[0, 0]).unwrap(), 0.0);
        assert_abs_diff_eq!(*dx2.coeff(&[0, 1]).unwrap(), 6.0);
        assert_abs_diff_eq!(*dx2.coeff(&[1, 0]).unwrap(), 4.0);
    }

    #[test]
    fn eval_matches_polynomial() {
        // p = 2 + xi1 - 0.5 xi1 xi2 + xi2^3 at (0.3, -0.2).
        let mut p = Jet::zero(2, 3);
        p.set_coeff(&[0, 0], 2.0).unwrap();
        p.set_coeff(&[1, 0], 1.0).unwrap();
        p.set_coeff(&[1, 1], -0.5).unwrap();
        p.set_coeff(&[0, 3], 1.0).unwrap();
        let got = p.eval(&[0.3, -0.2]).unwrap();
        let want = 2.0 + 0.3 - 0.5 * 0.3 * (-0.2) + (-0.2f64).powi(3);
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
    }

    #[test]
    fn variable_jet_squares_correctly() {
        let x = Jet::variable(1, 4, 0, 2.0); // 2 + xi
        let sq = x.mul(&x).unwrap();
        assert_abs_diff_eq!(*sq.coeff(&[0]).unwrap(), 4.0);
        assert_abs_diff_eq!(*sq.coeff(&[1]).unwrap(), 4.0);
        assert_abs_diff_eq!(*sq.coeff(&[2]).unwrap(), 1.0);
        assert_abs_diff_eq!(*sq.coeff(&[3]).unwrap(), 0.0);
    }

    #[test]
    fn serde_round_trip() {
        let a = sample(2, 3, 42);
        let json = serde_json::to_string(&a).unwrap();
        let back: Jet<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Jet::<f64>::zero(2, 3);
        let b = Jet::<f64>::zero(2, 4);
        assert!(matches!(a.add(&b), Err(CmcError::Shape(_))));
        let c = Jet::<f64>::zero(1, 3);
        assert!(matches!(a.mul(&c), Err(CmcError::Shape(_))));
    }

    #[test]
    fn exact_rational_recip_is_exact() {
        use num_bigint::BigInt;
        use num_rational::BigRational;
        let rat = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
        let mut a = Jet::<BigRational>::constant(1, 5, rat(3, 2));
        a.set_coeff(&[1], rat(1, 3)).unwrap();
        a.set_coeff(&[2], rat(-2, 7)).unwrap();
        let r = a.recip().unwrap();
        let prod = a.mul(&r).unwrap();
        let one = Jet::<BigRational>::constant(1, 5, rat(1, 1));
        assert_eq!(prod, one);
    }

    #[test]
    fn exact_rational_sqrt_of_perfect_square() {
        use num_bigint::BigInt;
        use num_rational::BigRational;
        let rat = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
        let mut a = Jet::<BigRational>::constant(1, 4, rat(25, 16));
        a.set_coeff(&[1], rat(1, 2)).unwrap();
        let s = a.sqrt().unwrap();
        assert_eq!(s.mul(&s).unwrap(), a);
        assert_eq!(*s.constant_term(), rat(5, 4));
        // Non-perfect-square constants are an error.
        let b = Jet::<BigRational>::constant(1, 4, rat(2, 1));
        assert!(matches!(b.sqrt(), Err(CmcError::Singular(_))));
    }
}
