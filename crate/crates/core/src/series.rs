//! Finite expansions in `t` and `log t` with jet coefficients.
//!
//! A [`LogSeries`] is a sum of terms `c_{i,j}(xi) * t^i * (log t)^j` with
//! jet-valued coefficients, truncated at a declared `t_order` (terms with
//! `i <= t_order` are trustworthy) and bounded log power `log_cap`.
//! Structural invariants, enforced on every insertion:
//!
//! - every coefficient jet has the same `(dim, jet_order)` shape,
//! - `i <= t_order` and `j <= log_cap`,
//! - `j > 0` implies `i >= 1` (log terms are always damped by at least one
//!   power of `t`, so everything stays bounded as `t -> 0`).
//!
//! Binary operations require identical `(dim, jet_order, t_order)` budgets;
//! reconciling budgets is always an explicit, caller-visible step. Products
//! silently drop terms beyond `t_order` (that is what truncation means) but
//! *fail loudly* if a nonzero term would exceed `log_cap`, since the log
//! budget is chosen to be provably sufficient and overflowing it indicates a
//! bug, not roundoff.

use crate::coeff::Coeff;
use crate::error::{CmcError, Result};
use crate::jet::Jet;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;

/// Truncated expansion `sum c_{i,j}(xi) t^i (log t)^j`.
#[derive(Clone, PartialEq)]
pub struct LogSeries<C: Coeff = f64> {
    dim: usize,
    jet_order: usize,
    t_order: usize,
    log_cap: usize,
    terms: BTreeMap<(usize, usize), Jet<C>>,
}

impl<C: Coeff> std::fmt::Debug for LogSeries<C> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogSeries")
            .field("dim", &self.dim)
            .field("jet_order", &self.jet_order)
            .field("t_order", &self.t_order)
            .field("log_cap", &self.log_cap)
            .field("terms", &self.terms)
            .finish()
    }
}

impl<C: Coeff> LogSeries<C> {
    /// The zero series with the given shape and budgets.
    pub fn zero(dim: usize, jet_order: usize, t_order: usize, log_cap: usize) -> Self {
        LogSeries { dim, jet_order, t_order, log_cap, terms: BTreeMap::new() }
    }

    /// A series with a single term `jet * t^i (log t)^j`.
    pub fn monomial(
        t_order: usize,
        log_cap: usize,
        i: usize,
        j: usize,
        jet: Jet<C>,
    ) -> Result<Self> {
        let mut s = Self::zero(jet.dim(), jet.order(), t_order, log_cap);
        s.insert(i, j, jet)?;
        Ok(s)
    }

    /// Number of tangential variables of the coefficient jets.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Truncation order of the coefficient jets.
    pub fn jet_order(&self) -> usize {
        self.jet_order
    }

    /// Highest trustworthy power of `t`.
    pub fn t_order(&self) -> usize {
        self.t_order
    }

    /// Declared bound on log powers.
    pub fn log_cap(&self) -> usize {
        self.log_cap
    }

    /// Iterate over nonzero terms in `(i, j)` order.
    pub fn terms(&self) -> impl Iterator<Item = (usize, usize, &Jet<C>)> {
        self.terms.iter().map(|(&(i, j), jet)| (i, j, jet))
    }

    /// Number of stored (nonzero) terms.
    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    /// Add `jet * t^i (log t)^j` into the series, enforcing the structural
    /// invariants.
    pub fn insert(&mut self, i: usize, j: usize, jet: Jet<C>) -> Result<()> {
        if jet.dim() != self.dim || jet.order() != self.jet_order {
            return Err(CmcError::Shape(format!(
                "series term jet has shape (dim {}, order {}), series expects (dim {}, order {})",
                jet.dim(),
                jet.order(),
                self.dim,
                self.jet_order
            )));
        }
        if i > self.t_order {
            return Err(CmcError::Shape(format!(
                "series term t^{i} exceeds t budget {}",
                self.t_order
            )));
        }
        if j > self.log_cap {
            return Err(CmcError::Singular(format!(
                "series term (log t)^{j} exceeds log cap {}",
                self.log_cap
            )));
        }
        if j > 0 && i == 0 {
            return Err(CmcError::Shape(
                "series term t^0 (log t)^j with j > 0 is unbounded near t = 0".to_string(),
            ));
        }
        if jet.is_zero() {
            return Ok(());
        }
        match self.terms.entry((i, j)) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(jet);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let sum = o.get().add(&jet)?;
                if sum.is_zero() {
                    o.remove();
                } else {
                    *o.get_mut() = sum;
                }
            }
        }
        Ok(())
    }

    /// Coefficient jet of `t^i (log t)^j` (zero jet if absent).
    pub fn coeff(&self, i: usize, j: usize) -> Jet<C> {
        self.terms
            .get(&(i, j))
            .cloned()
            .unwrap_or_else(|| Jet::zero(self.dim, self.jet_order))
    }

    /// True when no nonzero terms are stored.
    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Largest coefficient magnitude across all terms (diagnostic norm).
    pub fn sup_norm(&self) -> f64 {
        self.terms.values().map(Jet::sup_norm).fold(0.0, f64::max)
    }

    fn check_compatible(&self, other: &Self, what: &str) -> Result<()> {
        if self.dim != other.dim
            || self.jet_order != other.jet_order
            || self.t_order != other.t_order
        {
            return Err(CmcError::Shape(format!(
                "{what}: series budgets differ \
                 (dim {} jet_order {} t_order {} vs dim {} jet_order {} t_order {}); \
                 reconcile budgets explicitly before combining",
                self.dim,
                self.jet_order,
                self.t_order,
                other.dim,
                other.jet_order,
                other.t_order
            )));
        }
        Ok(())
    }

    /// Term-wise sum. Budgets `(dim, jet_order, t_order)` must match; the
    /// result's log cap is the larger of the two.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other, "add")?;
        let mut out = self.clone();
        out.log_cap = self.log_cap.max(other.log_cap);
        for (&(i, j), jet) in &other.terms {
            out.insert(i, j, jet.clone())?;
        }
        Ok(out)
    }

    /// Term-wise difference.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.neg())
    }

    /// Negation.
    pub fn neg(&self) -> Self {
        let mut out = self.clone();
        for jet in out.terms.values_mut() {
            *jet = jet.neg();
        }
        out
    }

    /// Multiply every coefficient by a scalar.
    pub fn scale(&self, k: &C) -> Self {
        let mut out = Self::zero(self.dim, self.jet_order, self.t_order, self.log_cap);
        for (&(i, j), jet) in &self.terms {
            let scaled = jet.scale(k);
            if !scaled.is_zero() {
                out.terms.insert((i, j), scaled);
            }
        }
        out
    }

    /// Truncated product. Terms beyond `t_order` are dropped (truncation);
    /// a nonzero term beyond `log_cap` is an error, because the log budget
    /// is meant to be provably sufficient.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other, "mul")?;
        let mut out = Self::zero(
            self.dim,
            self.jet_order,
            self.t_order,
            self.log_cap.max(other.log_cap),
        );
        for (&(i1, j1), a) in &self.terms {
            for (&(i2, j2), b) in &other.terms {
                let i = i1 + i2;
                if i > self.t_order {
                    continue;
                }
                let j = j1 + j2;
                let prod = a.mul(b)?;
                if prod.is_zero() {
                    continue;
                }
                if j > out.log_cap {
                    return Err(CmcError::Singular(format!(
                        "series product created nonzero term t^{i} (log t)^{j} \
                         beyond log cap {}; the declared log budget is insufficient",
                        out.log_cap
                    )));
                }
                out.insert(i, j, prod)?;
            }
        }
        Ok(out)
    }

    /// Multiplicative inverse. The `t^0` coefficient jet must be invertible
    /// (nonzero value at the base point).
    pub fn recip(&self) -> Result<Self> {
        let lead = self.coeff(0, 0);
        if lead.constant_term().is_zero() {
            return Err(CmcError::Singular(
                "series reciprocal: t^0 coefficient vanishes at the base point".to_string(),
            ));
        }
        // Newton iteration x <- x (2 - a x), seeded with the exact jet
        // reciprocal of the t^0 coefficient. The error's t-grade doubles per
        // step, so ceil(log2(t_order + 1)) + 1 steps suffice (exactly, in an
        // exact coefficient field).
        let mut x = Self::monomial(self.t_order, self.log_cap, 0, 0, lead.recip()?)?;
        let two = Self::monomial(
            self.t_order,
            self.log_cap,
            0,
            0,
            Jet::constant(self.dim, self.jet_order, C::from_i64(2)),
        )?;
        let steps = (usize::BITS - self.t_order.leading_zeros()) as usize + 1;
        for _ in 0..steps {
            x = x.mul(&two.sub(&self.mul(&x)?)?)?;
        }
        Ok(x)
    }

    /// Square root (positive branch). The `t^0` coefficient's value at the
    /// base point must admit a square root in the coefficient field.
    pub fn sqrt(&self) -> Result<Self> {
        let lead = self.coeff(0, 0);
        // Newton iteration s <- (s + a/s) / 2, seeded with the exact jet
        // square root of the t^0 coefficient; t-grade of the error doubles
        // per step.
        let mut s = Self::monomial(self.t_order, self.log_cap, 0, 0, lead.sqrt()?)?;
        let half = C::one() / C::from_i64(2);
        let steps = (usize::BITS - self.t_order.leading_zeros()) as usize + 1;
        for _ in 0..steps {
            s = s.add(&self.mul(&s.recip()?)?)?.scale(&half);
        }
        Ok(s)
    }

    /// Derivative in `t`. Differentiating `t^i (log t)^j` gives
    /// `i t^(i-1) (log t)^j + j t^(i-1) (log t)^(j-1)`, so the result's
    /// `t_order` drops by one. Requires `t_order >= 1`: a series trusted
    /// only at `t^0` holds no information about its `t`-derivative.
    pub fn dt(&self) -> Result<Self> {
        if self.t_order == 0 {
            return Err(CmcError::Shape(
                "d/dt of a series with t budget 0 would fabricate information".to_string(),
            ));
        }
        let mut out = Self::zero(self.dim, self.jet_order, self.t_order - 1, self.log_cap);
        for (&(i, j), jet) in &self.terms {
            // A term t^1 (log t)^j with j >= 1 differentiates to a bare
            // (log t)^j, which this type cannot represent (and which is
            // unbounded as t -> 0): reject rather than misfile it.
            if i == 1 && j >= 1 {
                return Err(CmcError::Singular(format!(
                    "d/dt of a nonzero t^1 (log t)^{j} term leaves the bounded series class"
                )));
            }
            if i >= 1 {
                out.insert(i - 1, j, jet.scale(&C::from_i64(i as i64)))?;
                if j >= 1 {
                    out.insert(i - 1, j - 1, jet.scale(&C::from_i64(j as i64)))?;
                }
            }
        }
        Ok(out)
    }

    /// Divide by `t`. Every term must carry at least one power of `t`;
    /// a nonzero `t^0` term makes the quotient singular, which is reported
    /// as an error rather than dropped.
    pub fn div_t(&self) -> Result<Self> {
        if self.t_order == 0 {
            return Err(CmcError::Shape(
                "cannot divide a series with t budget 0 by t".to_string(),
            ));
        }
        for (&(i, j), jet) in &self.terms {
            if i == 0 && !jet.is_zero() {
                return Err(CmcError::Singular(format!(
                    "division by t: series has a nonzero t^0 (log t)^{j} term"
                )));
            }
        }
        let mut out = Self::zero(self.dim, self.jet_order, self.t_order - 1, self.log_cap);
        for (&(i, j), jet) in &self.terms {
            // After the pre-check every nonzero term has i >= 1, but dividing
            // can still strand a log term at t^0: that is equally singular.
            if i == 1 && j > 0 {
                return Err(CmcError::Singular(format!(
                    "division by t: term t^1 (log t)^{j} would become unbounded"
                )));
            }
            out.insert(i - 1, j, jet.clone())?;
        }
        Ok(out)
    }

    /// Multiply by `t`. Every slot shifts up and the trusted budget grows
    /// with it.
    pub fn mul_t(&self) -> Self {
        let mut out = Self::zero(self.dim, self.jet_order, self.t_order + 1, self.log_cap);
        for (&(i, j), jet) in &self.terms {
            out.terms.insert((i + 1, j), jet.clone());
        }
        out
    }

    /// Tangential derivative: term-wise jet derivative. The jet order drops
    /// by one.
    pub fn diff_x(&self, axis: usize) -> Self {
        let mut out = Self::zero(self.dim, self.jet_order - 1, self.t_order, self.log_cap);
        for (&(i, j), jet) in &self.terms {
            let d = jet.diff(axis);
            if !d.is_zero() {
                out.terms.insert((i, j), d);
            }
        }
        out
    }

    /// Lower the `t` budget, dropping terms beyond it.
    pub fn truncate_t(&self, new_t_order: usize) -> Self {
        assert!(
            new_t_order <= self.t_order,
            "truncate_t can only lower the budget ({} -> {new_t_order})",
            self.t_order
        );
        let mut out = self.clone();
        out.t_order = new_t_order;
        out.terms.retain(|&(i, _), _| i <= new_t_order);
        out
    }

    /// Raise the declared `t` budget without adding terms. Only valid when
    /// the series is *exactly* polynomial in `t` (all higher coefficients
    /// genuinely vanish), e.g. a fully assembled expansion; the caller
    /// asserts that by calling this.
    pub fn assert_polynomial_through(&self, new_t_order: usize) -> Self {
        assert!(new_t_order >= self.t_order);
        let mut out = self.clone();
        out.t_order = new_t_order;
        out
    }

    /// Lower the jet budget of every term.
    pub fn truncate_jets(&self, new_jet_order: usize) -> Self {
        assert!(
            new_jet_order <= self.jet_order,
            "truncate_jets can only lower the budget ({} -> {new_jet_order})",
            self.jet_order
        );
        let mut out = Self::zero(self.dim, new_jet_order, self.t_order, self.log_cap);
        for (&(i, j), jet) in &self.terms {
            let t = jet.resized(new_jet_order);
            if !t.is_zero() {
                out.terms.insert((i, j), t);
            }
        }
        out
    }

    /// Raise the declared log cap (never changes stored terms).
    pub fn with_log_cap(&self, new_cap: usize) -> Self {
        assert!(new_cap >= self.log_cap, "use of with_log_cap to lower a cap would hide terms");
        let mut out = self.clone();
        out.log_cap = new_cap;
        out
    }

    /// Evaluate at a tangential offset and a time `t > 0` (float view).
    pub fn eval(&self, offset: &[C], t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Err(CmcError::Domain(format!("series evaluation requires t > 0, got {t}")));
        }
        let log_t = t.ln();
        let mut total = 0.0;
        for (&(i, j), jet) in &self.terms {
            let c = jet.eval(offset)?.to_f64();
            total += c * t.powi(i as i32) * log_t.powi(j as i32);
        }
        Ok(total)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermRepr<C: Coeff> {
    i: usize,
    j: usize,
    #[serde(bound(
        serialize = "C: Serialize",
        deserialize = "C: serde::de::DeserializeOwned"
    ))]
    jet: Jet<C>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeriesRepr<C: Coeff> {
    #[serde(bound(
        serialize = "C: Serialize",
        deserialize = "C: serde::de::DeserializeOwned"
    ))]
    terms: Vec<TermRepr<C>>,
    t_order: usize,
    dim: usize,
    jet_order: usize,
    log_cap: usize,
}

impl<C: Coeff + Serialize> Serialize for LogSeries<C> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let terms = self
            .terms
            .iter()
            .map(|(&(i, j), jet)| TermRepr { i, j, jet: jet.clone() })
            .collect();
        SeriesRepr {
            terms,
            t_order: self.t_order,
            dim: self.dim,
            jet_order: self.jet_order,
            log_cap: self.log_cap,
        }
        .serialize(serializer)
    }
}

impl<'de, C: Coeff + serde::de::DeserializeOwned> Deserialize<'de> for LogSeries<C> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = SeriesRepr::<C>::deserialize(deserializer)?;
        let mut out = LogSeries::zero(repr.dim, repr.jet_order, repr.t_order, repr.log_cap);
        for term in repr.terms {
            out.insert(term.i, term.j, term.jet).map_err(D::Error::custom)?;
        }
        Ok(out)
    }
}
