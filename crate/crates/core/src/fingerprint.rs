//! Rabin fingerprints over GF(2).
//!
//! A bit string is read as a polynomial: word `u`, bit `b` is the
//! coefficient of `t^(64u + b)`. Residues modulo an irreducible polynomial
//! of degree `k <= 127` fit in a `u128`. A page with index `i` contributes
//! `hash(page) * t^(i * page_bits)`, so a whole state hashes to the XOR of
//! its page terms and a page update costs one XOR pair.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Mutex;

use thiserror::Error;

/// `t^127 + t + 1`.
pub const DEFAULT_MODULUS: u128 = (1 << 127) | 0b11;

/// 4096-byte pages.
pub const DEFAULT_PAGE_BITS: u64 = 1 << 15;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Fingerprint(pub u128);

impl Fingerprint {
    pub const ZERO: Fingerprint = Fingerprint(0);
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FingerprintError {
    #[error("modulus must have degree between 1 and 127")]
    BadDegree,
    #[error("modulus {modulus:#x} is reducible ({reason})")]
    Reducible { modulus: u128, reason: String },
    #[error("page size {0} bits is not a power of two")]
    BadPageSize(u64),
    #[error("page {0} appears more than once")]
    DuplicatePage(u64),
}

/// 256-bit scratch value for products before reduction.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct Wide {
    hi: u128,
    lo: u128,
}

impl Wide {
    fn from(lo: u128) -> Wide {
        Wide { hi: 0, lo }
    }

    fn shl(self, n: u32) -> Wide {
        match n {
            0 => self,
            1..=127 => Wide {
                hi: (self.hi << n) | (self.lo >> (128 - n)),
                lo: self.lo << n,
            },
            128..=255 => Wide {
                hi: self.lo << (n - 128),
                lo: 0,
            },
            _ => Wide { hi: 0, lo: 0 },
        }
    }

    fn shr(self, n: u32) -> Wide {
        match n {
            0 => self,
            1..=127 => Wide {
                hi: self.hi >> n,
                lo: (self.lo >> n) | (self.hi << (128 - n)),
            },
            128..=255 => Wide {
                hi: 0,
                lo: self.hi >> (n - 128),
            },
            _ => Wide { hi: 0, lo: 0 },
        }
    }

    fn xor(self, o: Wide) -> Wide {
        Wide {
            hi: self.hi ^ o.hi,
            lo: self.lo ^ o.lo,
        }
    }

    fn is_zero(self) -> bool {
        self.hi == 0 && self.lo == 0
    }
}

/// Carry-less product of two 128-bit polynomials.
fn clmul(a: u128, b: u128) -> Wide {
    // Iterate over the sparser operand.
    let (dense, mut sparse) = if a.count_ones() < b.count_ones() {
        (b, a)
    } else {
        (a, b)
    };
    let mut acc = Wide::from(0);
    while sparse != 0 {
        let j = sparse.trailing_zeros();
        acc = acc.xor(Wide::from(dense).shl(j));
        sparse &= sparse - 1;
    }
    acc
}

fn degree(p: u128) -> Option<u32> {
    (p != 0).then(|| 127 - p.leading_zeros())
}

/// Polynomial remainder by plain long division; used for gcds.
fn poly_rem(mut a: u128, b: u128) -> u128 {
    let db = degree(b).expect("division by zero polynomial");
    while let Some(da) = degree(a) {
        if da < db {
            break;
        }
        a ^= b << (da - db);
    }
    a
}

fn poly_gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let r = poly_rem(a, b);
        a = b;
        b = r;
    }
    a
}

fn prime_factors(mut n: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            out.push(d);
            while n.is_multiple_of(d) {
                n /= d;
            }
        }
        d += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// Arithmetic modulo a fixed polynomial of degree `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modulus {
    poly: u128,
    k: u32,
    /// `poly - t^k`, used to fold high bits back down.
    tail: u128,
}

impl Modulus {
    fn new(poly: u128) -> Result<Modulus, FingerprintError> {
        let k = degree(poly).filter(|&k| k >= 1).ok_or(FingerprintError::BadDegree)?;
        Ok(Modulus {
            poly,
            k,
            tail: poly ^ (1u128 << k),
        })
    }

    pub fn degree(&self) -> u32 {
        self.k
    }

    pub fn poly(&self) -> u128 {
        self.poly
    }

    fn low_mask(&self) -> u128 {
        if self.k == 128 {
            u128::MAX
        } else {
            (1u128 << self.k) - 1
        }
    }

    /// Folds `x` below degree `k` using `t^k = tail`.
    fn reduce(&self, mut x: Wide) -> u128 {
        loop {
            let q = x.shr(self.k);
            if q.is_zero() {
                return x.lo;
            }
            let mut folded = Wide::from(x.lo & self.low_mask());
            let mut tail = self.tail;
            while tail != 0 {
                let j = tail.trailing_zeros();
                folded = folded.xor(q.shl(j));
                tail &= tail - 1;
            }
            x = folded;
        }
    }

    pub fn mul(&self, a: u128, b: u128) -> u128 {
        self.reduce(clmul(a, b))
    }

    /// `x * t^64 + limb`, the Horner step over 64-bit words.
    fn shift_in(&self, x: u128, limb: u64) -> u128 {
        let w = Wide::from(x).shl(64).xor(Wide::from(limb as u128));
        self.reduce(w)
    }

    /// `t^e mod P` by square-and-multiply.
    pub fn pow_t(&self, e: u128) -> u128 {
        let t = self.reduce(Wide::from(2));
        let mut acc = self.reduce(Wide::from(1));
        for bit in (0..128 - e.leading_zeros()).rev() {
            acc = self.mul(acc, acc);
            if (e >> bit) & 1 == 1 {
                acc = self.mul(acc, t);
            }
        }
        acc
    }

    /// `t^(2^n) mod P` by repeated squaring.
    fn t_pow_pow2(&self, n: u32) -> u128 {
        let mut x = self.reduce(Wide::from(2));
        for _ in 0..n {
            x = self.mul(x, x);
        }
        x
    }

    /// Rabin's test: `P` is irreducible iff `t^(2^k) = t (mod P)` and
    /// `gcd(t^(2^(k/q)) - t, P) = 1` for every prime `q | k`.
    pub fn check_irreducible(&self) -> Result<(), FingerprintError> {
        let reducible = |reason: String| FingerprintError::Reducible {
            modulus: self.poly,
            reason,
        };
        let t = self.reduce(Wide::from(2));
        if self.t_pow_pow2(self.k) != t {
            return Err(reducible(format!("t^(2^{}) != t", self.k)));
        }
        for q in prime_factors(self.k) {
            let e = self.k / q;
            let g = poly_gcd(self.poly, self.t_pow_pow2(e) ^ t);
            if g != 1 {
                return Err(reducible(format!("shares factor {g:#x} with t^(2^{e}) - t")));
            }
        }
        Ok(())
    }
}

/// Modulus, page geometry and a cache of page shift factors.
pub struct FingerprintContext {
    modulus: Modulus,
    page_bits: u64,
    shifts: Mutex<HashMap<u64, u128>>,
}

impl fmt::Debug for FingerprintContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FingerprintContext")
            .field("modulus", &format_args!("{:#x}", self.modulus.poly))
            .field("page_bits", &self.page_bits)
            .finish()
    }
}

impl FingerprintContext {
    pub fn new(modulus: u128, page_bits: u64) -> Result<Self, FingerprintError> {
        if !page_bits.is_power_of_two() {
            return Err(FingerprintError::BadPageSize(page_bits));
        }
        let modulus = Modulus::new(modulus)?;
        modulus.check_irreducible()?;
        Ok(FingerprintContext {
            modulus,
            page_bits,
            shifts: Mutex::new(HashMap::new()),
        })
    }

    /// Degree 127 modulus over 4096-byte pages.
    pub fn standard() -> Self {
        Self::new(DEFAULT_MODULUS, DEFAULT_PAGE_BITS).expect("default modulus is irreducible")
    }

    pub fn modulus(&self) -> &Modulus {
        &self.modulus
    }

    pub fn page_bits(&self) -> u64 {
        self.page_bits
    }

    pub fn add(&self, a: Fingerprint, b: Fingerprint) -> Fingerprint {
        Fingerprint(a.0 ^ b.0)
    }

    pub fn mul_mod(&self, a: Fingerprint, b: Fingerprint) -> Fingerprint {
        Fingerprint(self.modulus.mul(a.0, b.0))
    }

    pub fn pow_t_mod(&self, e: u128) -> Fingerprint {
        Fingerprint(self.modulus.pow_t(e))
    }

    /// `t^(index * page_bits) mod P`, memoized per page index.
    pub fn page_shift(&self, index: u64) -> Fingerprint {
        let mut cache = self.shifts.lock().unwrap_or_else(|e| e.into_inner());
        let v = *cache
            .entry(index)
            .or_insert_with(|| self.modulus.pow_t(index as u128 * self.page_bits as u128));
        Fingerprint(v)
    }

    /// Residue of a page's bit string. Bits beyond `page_bits` must be zero.
    pub fn hash_page(&self, words: &[u64]) -> Fingerprint {
        let mut h = 0u128;
        let top = words.iter().rposition(|w| *w != 0).map_or(0, |i| i + 1);
        for &w in words[..top].iter().rev() {
            h = self.modulus.shift_in(h, w);
        }
        Fingerprint(h)
    }

    /// Contribution of the page at `index` to a state fingerprint.
    pub fn page_term(&self, index: u64, words: &[u64]) -> Fingerprint {
        let h = self.hash_page(words);
        if h.0 == 0 {
            return h;
        }
        self.mul_mod(h, self.page_shift(index))
    }

    /// Applies `(index, old, new)` page replacements to `fp`.
    pub fn incremental_update(
        &self,
        fp: Fingerprint,
        changes: &[(u64, &[u64], &[u64])],
    ) -> Result<Fingerprint, FingerprintError> {
        let mut seen = HashSet::new();
        let mut acc = fp;
        for &(index, old, new) in changes {
            if !seen.insert(index) {
                return Err(FingerprintError::DuplicatePage(index));
            }
            acc = self.add(acc, self.page_term(index, old));
            acc = self.add(acc, self.page_term(index, new));
        }
        Ok(acc)
    }

    /// Fingerprint of a whole state given as `(index, page)` pairs.
    pub fn full_hash<'a>(
        &self,
        pages: impl IntoIterator<Item = (u64, &'a [u64])>,
    ) -> Result<Fingerprint, FingerprintError> {
        let mut seen = HashSet::new();
        let mut acc = Fingerprint::ZERO;
        for (index, words) in pages {
            if !seen.insert(index) {
                return Err(FingerprintError::DuplicatePage(index));
            }
            acc = self.add(acc, self.page_term(index, words));
        }
        Ok(acc)
    }
}
