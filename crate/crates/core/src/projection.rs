//! Euclidean projections onto the pruning and quantization constraint sets,
//! and the search for a layer's quantization interval.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const MAX_BITS: u8 = 16;

/// Equal-distance quantizer with `2^bits` nonzero levels
/// `{-(M/2)q, …, -q, q, …, (M/2)q}`; zero is not a level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub interval: f64,
    pub bits: u8,
}

impl Quantizer {
    pub fn new(interval: f64, bits: u8) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(invalid(format!("bits must be in 1..={MAX_BITS}, got {bits}")));
        }
        if !(interval.is_finite() && interval > 0.0) {
            return Err(invalid(format!("interval must be positive, got {interval}")));
        }
        Ok(Self { interval, bits })
    }

    /// `M`, the number of levels.
    pub fn level_count(&self) -> usize {
        1 << self.bits
    }

    /// `M / 2`, the largest level index.
    pub fn max_level(&self) -> i64 {
        1 << (self.bits - 1)
    }

    pub fn level_value(&self, k: i64) -> f64 {
        k as f64 * self.interval
    }

    /// Signed index `k` of the level nearest to `v`. Midpoints round away
    /// from zero; `v = 0` maps to `+1`.
    pub fn nearest_level(&self, v: f64) -> i64 {
        let q = self.interval;
        let top = self.max_level();
        let a = v.abs();
        let k0 = ((a / q).round() as i64).clamp(1, top);
        let mut best = k0;
        let mut best_d = (a - k0 as f64 * q).abs();
        // The division can misround near a midpoint; settle it on the
        // distances themselves.
        for k in [k0 - 1, k0 + 1] {
            if !(1..=top).contains(&k) {
                continue;
            }
            let d = (a - k as f64 * q).abs();
            if d < best_d || (d == best_d && k > best) {
                best = k;
                best_d = d;
            }
        }
        if v < 0.0 {
            -best
        } else {
            best
        }
    }

    pub fn quantize(&self, v: f64) -> f64 {
        self.level_value(self.nearest_level(v))
    }

    /// Level index of `v` if `v` is exactly a level value.
    pub fn level_of(&self, v: f64) -> Option<i64> {
        let k = self.nearest_level(v);
        (self.level_value(k) == v).then_some(k)
    }
}

/// Ascending level values, `M` of them, symmetric about zero.
pub fn quantization_levels(quantizer: &Quantizer) -> Vec<f64> {
    let top = quantizer.max_level();
    (-top..=top)
        .filter(|&k| k != 0)
        .map(|k| quantizer.level_value(k))
        .collect()
}

/// Per-layer constraint set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSet {
    /// At most `alpha` nonzero weights.
    Cardinality { alpha: usize },
    /// Every surviving weight sits on a quantization level.
    Quantization(Quantizer),
}

impl ConstraintSet {
    /// Projects `v`; `mask` marks the surviving positions for quantization
    /// (ignored for cardinality).
    pub fn project(&self, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        match self {
            ConstraintSet::Cardinality { alpha } => project_cardinality(v, *alpha),
            ConstraintSet::Quantization(q) => match mask {
                Some(m) => project_quantize(v, q, m),
                None => Ok(v.map(|x| q.quantize(x))),
            },
        }
    }

    /// Exact membership test.
    pub fn contains(&self, t: &Tensor, mask: Option<&Tensor>) -> bool {
        match self {
            ConstraintSet::Cardinality { alpha } => t.count_nonzero() <= *alpha,
            ConstraintSet::Quantization(q) => t.data().iter().enumerate().all(|(i, &v)| {
                let live = mask.is_none_or(|m| m.data()[i] != 0.0);
                if live {
                    q.level_of(v).is_some()
                } else {
                    v == 0.0
                }
            }),
        }
    }
}

/// Keeps the `alpha` largest-magnitude entries and zeroes the rest. Equal
/// magnitudes favour the lower flat index.
pub fn project_cardinality(v: &Tensor, alpha: usize) -> Result<Tensor> {
    let n = v.len();
    if alpha > n {
        return Err(invalid(format!("alpha {alpha} exceeds element count {n}")));
    }
    if alpha == n {
        return Ok(v.clone());
    }
    let mut out = Tensor::zeros(v.shape());
    if alpha == 0 {
        return Ok(out);
    }
    let data = v.data();
    let mut order: Vec<usize> = (0..n).collect();
    let by_magnitude = |&a: &usize, &b: &usize| -> Ordering {
        data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b))
    };
    order.select_nth_unstable_by(alpha - 1, by_magnitude);
    for &i in &order[..alpha] {
        out.data_mut()[i] = data[i];
    }
    Ok(out)
}

/// Rounds every masked-in entry to its nearest level; masked-out entries become 0.
pub fn project_quantize(v: &Tensor, quantizer: &Quantizer, mask: &Tensor) -> Result<Tensor> {
    mask.ensure_same_shape(v, "quantization mask")?;
    v.zip_map(mask, |x, m| if m != 0.0 { quantizer.quantize(x) } else { 0.0 })
}

/// Total squared error of quantizing `weights` with `quantizer`.
pub fn quantization_error(weights: &[f64], quantizer: &Quantizer) -> f64 {
    weights
        .iter()
        .map(|&w| {
            let d = w - quantizer.quantize(w);
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalFit {
    pub interval: f64,
    /// Total squared quantization error at `interval`.
    pub error: f64,
}

const COARSE_STEPS: usize = 128;
const REFINED_BRACKETS: usize = 4;
const GOLDEN_ITERS: usize = 80;
const POLISH_ITERS: usize = 100;
/// Above this many assignment breakpoints the exact sweep is skipped.
const MAX_SWEEP_EVENTS: usize = 8_000_000;
/// Sweep candidates re-scored with the exact error.
const SWEEP_SHORTLIST: usize = 8;

/// Interval `q` minimizing the total squared quantization error of `weights`
/// with `2^bits` levels.
///
/// With the level assignment fixed, the error is a quadratic in `q`; it only
/// changes where some `|w| / q` crosses a midpoint `k + 1/2`. When there are
/// few enough such breakpoints they are swept in order, giving the global
/// minimum piece by piece. Otherwise a coarse scan over `(0, 2·max|w|]` picks
/// brackets for golden-section refinement. Either way the result is polished
/// by alternating level assignment with the closed-form optimal interval.
pub fn fit_interval(weights: &[f64], bits: u8) -> Result<IntervalFit> {
    if weights.is_empty() {
        return Err(invalid("cannot fit an interval to an empty weight set"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(invalid("weights must be finite"));
    }
    // Validates `bits`.
    Quantizer::new(1.0, bits)?;
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max_abs == 0.0 {
        return Err(invalid("weights are all zero"));
    }

    let error_at = |q: f64| quantization_error(weights, &Quantizer { interval: q, bits });
    let mut best = IntervalFit {
        interval: max_abs,
        error: error_at(max_abs),
    };
    let consider = |q: f64, e: f64, best: &mut IntervalFit| {
        if e < best.error {
            *best = IntervalFit { interval: q, error: e };
        }
    };

    let top = 1usize << (bits - 1);
    let anchor = max_abs / top as f64;
    consider(anchor, error_at(anchor), &mut best);

    if weights.len().saturating_mul(top - 1) <= MAX_SWEEP_EVENTS {
        for q in sweep_candidates(weights, top) {
            consider(q, error_at(q), &mut best);
        }
    } else {
        let step = 2.0 * max_abs / COARSE_STEPS as f64;
        let grid: Vec<(f64, f64)> = (1..=COARSE_STEPS)
            .map(|j| {
                let q = step * j as f64;
                (q, error_at(q))
            })
            .collect();
        let mut ranked: Vec<usize> = (0..grid.len()).collect();
        ranked.sort_by(|&a, &b| grid[a].1.total_cmp(&grid[b].1).then(a.cmp(&b)));
        for &j in ranked.iter().take(REFINED_BRACKETS) {
            let (q, e) = grid[j];
            consider(q, e, &mut best);
            let lo = if j == 0 { step * 1e-3 } else { grid[j - 1].0 };
            let hi = grid.get(j + 1).map_or(grid[j].0, |g| g.0);
            let (gq, ge) = golden_section(&error_at, lo, hi);
            consider(gq, ge, &mut best);
        }
    }

    let (pq, pe) = polish(weights, bits, best.interval, best.error);
    consider(pq, pe, &mut best);
    Ok(best)
}

/// Per-piece optimal intervals along the breakpoint sweep, best first
/// (by the piece's quadratic model).
fn sweep_candidates(weights: &[f64], top: usize) -> Vec<f64> {
    // As q grows from 0 every |w| > 0 starts at level `top` and drops one
    // level at q = |w| / (k − 1/2), k = top..2. Zero weights sit at level 1.
    let mut events: Vec<(f64, f64, usize)> = Vec::with_capacity(weights.len() * (top - 1));
    let (mut s1, mut s2, mut sq) = (0.0f64, 0.0f64, 0.0f64);
    for &w in weights {
        let a = w.abs();
        sq += a * a;
        if a == 0.0 {
            s2 += 1.0;
            continue;
        }
        s1 += a * top as f64;
        s2 += (top * top) as f64;
        for k in 2..=top {
            events.push((a / (k as f64 - 0.5), a, k));
        }
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut scored: Vec<(f64, f64)> = Vec::new();
    let mut piece = |lo: f64, hi: f64, s1: f64, s2: f64| {
        if s2 <= 0.0 || s1 <= 0.0 {
            return;
        }
        let q = (s1 / s2).clamp(lo, hi);
        if q > 0.0 && q.is_finite() {
            scored.push((sq - 2.0 * q * s1 + q * q * s2, q));
        }
    };
    let mut lo = 0.0;
    for &(at, a, k) in &events {
        piece(lo, at, s1, s2);
        s1 -= a;
        s2 -= (2 * k - 1) as f64;
        lo = at;
    }
    piece(lo, f64::INFINITY, s1, s2);

    scored.sort_by(|x, y| x.0.total_cmp(&y.0));
    scored.into_iter().take(SWEEP_SHORTLIST).map(|(_, q)| q).collect()
}

fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if b - a <= 1e-15 * b {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Alternates nearest-level assignment with `q = Σ w·k / Σ k²`.
fn polish(weights: &[f64], bits: u8, mut q: f64, mut err: f64) -> (f64, f64) {
    for _ in 0..POLISH_ITERS {
        let quant = Quantizer { interval: q, bits };
        let (mut num, mut den) = (0.0, 0.0);
        for &w in weights {
            let k = quant.nearest_level(w) as f64;
            num += w * k;
            den += k * k;
        }
        let next = num / den;
        if !(next.is_finite() && next > 0.0) {
            break;
        }
        let next_err = quantization_error(weights, &Quantizer { interval: next, bits });
        if next_err >= err {
            break;
        }
        q = next;
        err = next_err;
    }
    (q, err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn cardinality_keeps_largest() {
        let out = project_cardinality(&t(&[0.9, -0.1, 0.5]), 2).unwrap();
        assert_eq!(out.data(), &[0.9, 0.0, 0.5]);
    }

    #[test]
    fn cardinality_extremes() {
        let v = t(&[0.3, -2.0, 0.0, 1.0]);
        assert_eq!(project_cardinality(&v, 4).unwrap(), v);
        assert_eq!(project_cardinality(&v, 0).unwrap().count_nonzero(), 0);
        assert!(project_cardinality(&v, 5).is_err());
    }

    #[test]
    fn cardinality_ties_keep_lower_index() {
        let out = project_cardinality(&t(&[0.5, -0.5, 0.5, 0.1]), 2).unwrap();
        assert_eq!(out.data(), &[0.5, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn cardinality_with_few_nonzeros_keeps_fewer() {
        let out = project_cardinality(&t(&[0.0, 2.0, 0.0, 0.0]), 3).unwrap();
        assert_eq!(out.count_nonzero(), 1);
    }

    #[test]
    fn quantize_examples() {
        let q = Quantizer::new(0.5, 3).unwrap();
        assert_eq!(q.quantize(1.3), 1.5);
        assert_eq!(q.quantize(0.01), 0.5);
        assert_eq!(q.quantize(0.75), 1.0);
        assert_eq!(q.quantize(-0.75), -1.0);
        assert_eq!(q.quantize(0.0), 0.5);
        assert_eq!(q.quantize(-0.0), 0.5);
        assert_eq!(q.quantize(9.0), 2.0);
        assert_eq!(q.quantize(-9.0), -2.0);
    }

    #[test]
    fn masked_quantize_zeroes_pruned() {
        let q = Quantizer::new(0.5, 3).unwrap();
        let out = project_quantize(&t(&[1.3, 0.7, -0.2]), &q, &t(&[1.0, 0.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[1.5, 0.0, -0.5]);
    }

    #[test]
    fn levels_match_definition() {
        let q = Quantizer::new(0.5, 3).unwrap();
        assert_eq!(
            quantization_levels(&q),
            vec![-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0]
        );
        let q1 = Quantizer::new(0.25, 1).unwrap();
        assert_eq!(quantization_levels(&q1), vec![-0.25, 0.25]);
        let q8 = Quantizer::new(0.1, 8).unwrap();
        let l = quantization_levels(&q8);
        assert_eq!(l.len(), 256);
        assert_eq!(l[0], -128.0 * 0.1);
        assert_eq!(l[255], 128.0 * 0.1);
    }

    #[test]
    fn quantizer_rejects_bad_parameters() {
        assert!(Quantizer::new(0.5, 0).is_err());
        assert!(Quantizer::new(0.5, 17).is_err());
        assert!(Quantizer::new(0.0, 3).is_err());
        assert!(Quantizer::new(f64::NAN, 3).is_err());
    }

    #[test]
    fn fit_exact_cases() {
        let fit = fit_interval(&[0.3; 7], 2).unwrap();
        assert_eq!(fit.error, 0.0);
        let fit = fit_interval(&[-1.0, 1.0], 1).unwrap();
        assert_eq!(fit.interval, 1.0);
        assert_eq!(fit.error, 0.0);
        assert!(fit_interval(&[], 3).is_err());
        assert!(fit_interval(&[0.0, 0.0], 3).is_err());
    }

    #[test]
    fn contains_checks_levels_and_mask() {
        let q = Quantizer::new(0.5, 2).unwrap();
        let c = ConstraintSet::Quantization(q);
        assert!(c.contains(&t(&[0.5, 0.0, -1.0]), Some(&t(&[1.0, 0.0, 1.0]))));
        assert!(!c.contains(&t(&[0.5, 0.0, -1.0]), None));
        assert!(!c.contains(&t(&[0.6, 0.0]), Some(&t(&[1.0, 0.0]))));
        let card = ConstraintSet::Cardinality { alpha: 1 };
        assert!(card.contains(&t(&[0.0, 3.0]), None));
        assert!(!card.contains(&t(&[1.0, 3.0]), None));
    }
}
