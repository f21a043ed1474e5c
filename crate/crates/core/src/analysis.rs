//! Evaluation metrics and information-theoretic quantities (all in nats).

use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};

/// Joint counts of two discrete variables, `counts[a][b]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointCountTable {
    counts: Vec<Vec<u64>>,
}

impl JointCountTable {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let width = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|r| r.len() != width) {
            return Err(Error::Domain("count table rows differ in length".into()));
        }
        Ok(Self { counts })
    }

    /// Tabulates paired observations; cardinalities are `max + 1`.
    pub fn from_pairs(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Domain(format!(
                "paired samples differ in length: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        let na = a.iter().max().map_or(0, |m| m + 1);
        let nb = b.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; nb]; na];
        for (&x, &y) in a.iter().zip(b) {
            counts[x][y] += 1;
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn transpose(&self) -> Self {
        let nb = self.counts.first().map_or(0, Vec::len);
        Self {
            counts: (0..nb)
                .map(|j| self.counts.iter().map(|r| r[j]).collect())
                .collect(),
        }
    }

    fn marginals(&self) -> (Vec<u64>, Vec<u64>) {
        let nb = self.counts.first().map_or(0, Vec::len);
        let row: Vec<u64> = self.counts.iter().map(|r| r.iter().sum()).collect();
        let col: Vec<u64> = (0..nb).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect();
        (row, col)
    }
}

fn entropy_of(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Entropies of the two marginals.
pub fn marginal_entropies(t: &JointCountTable) -> (f64, f64) {
    let (r, c) = t.marginals();
    (entropy_of(&r), entropy_of(&c))
}

/// Plug-in mutual information of the empirical joint distribution.
pub fn plugin_mi(t: &JointCountTable) -> Result<f64> {
    let total = t.total();
    if total == 0 {
        return Err(Error::Domain("mutual information of an empty table".into()));
    }
    let n = total as f64;
    let (row, col) = t.marginals();
    let mut mi = 0.0;
    for (i, r) in t.counts.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c == 0 {
                continue;
            }
            // p(a,b) / (p(a)p(b)) = c·n / (row·col)
            let ratio = (c as f64 * n) / (row[i] as f64 * col[j] as f64);
            mi += (c as f64 / n) * ratio.ln();
        }
    }
    Ok(mi.max(0.0))
}

/// Dataset-mean KL from `N(μ, σ²)` to the standard normal prior.
pub fn vib_mi_upper_bound(mu: &Tensor, log_var: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let m = g.constant(mu.clone());
    let l = g.constant(log_var.clone());
    let kl = g.gaussian_kl(m, l)?;
    Ok(g.scalar(kl))
}

/// Inputs of the backdoor-gap bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    pub i_ht: f64,
    pub i_hptp: f64,
    pub card_t: f64,
    pub min_p: f64,
    pub min_p_prime: f64,
    pub m_count: f64,
}

/// Bound value with its five components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundBreakdown {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub b0: f64,
    /// `[B1·|T|^½·I^½, B2·|T|^¾·I^¼, B3·|T|^½·I'^½, B4·|T|^¾·I'^¼]`
    pub terms: [f64; 4],
    pub total: f64,
}

/// Upper bound on `|I(Y,T) − I(Y,T')|`:
/// `B1·|T|^½·I^½ + B2·|T|^¾·I^¼ + B3·|T|^½·I'^½ + B4·|T|^¾·I'^¼ + ln M`
/// with `B2 = 4√(2 ln 2)/min_p`, `B1 = B2·ln(1/B2)` and `B3`, `B4` alike.
pub fn theorem1_rhs(b: &BoundInputs) -> Result<BoundBreakdown> {
    for (name, p) in [("min_p", b.min_p), ("min_p_prime", b.min_p_prime)] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain(format!("{name} must lie in (0, 1], got {p}")));
        }
    }
    for (name, v) in [("i_ht", b.i_ht), ("i_hptp", b.i_hptp)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("{name} must be a finite nonnegative number, got {v}")));
        }
    }
    if !(b.card_t >= 1.0) || !b.card_t.is_finite() {
        return Err(Error::Domain(format!("card_t must be at least 1, got {}", b.card_t)));
    }
    if !(b.m_count >= 1.0) || !b.m_count.is_finite() {
        return Err(Error::Domain(format!("m_count must be at least 1, got {}", b.m_count)));
    }
    let c = 4.0 * (2.0 * std::f64::consts::LN_2).sqrt();
    let b2 = c / b.min_p;
    let b4 = c / b.min_p_prime;
    let b1 = b2 * (1.0 / b2).ln();
    let b3 = b4 * (1.0 / b4).ln();
    let b0 = b.m_count.ln();
    let t = b.card_t;
    let terms = [
        b1 * t.sqrt() * b.i_ht.sqrt(),
        b2 * t.powf(0.75) * b.i_ht.powf(0.25),
        b3 * t.sqrt() * b.i_hptp.sqrt(),
        b4 * t.powf(0.75) * b.i_hptp.powf(0.25),
    ];
    let total = terms.iter().sum::<f64>() + b0;
    Ok(BoundBreakdown {
        b1,
        b2,
        b3,
        b4,
        b0,
        terms,
        total,
    })
}

/// Gap in plug-in `I(Y, Ŷ)` between clean and poisoned predictions.
pub fn lemma1_gap(clean: &[usize], poisoned: &[usize], labels: &[usize]) -> Result<f64> {
    if clean.len() != labels.len() || poisoned.len() != labels.len() {
        return Err(Error::Domain(format!(
            "lengths differ: clean {}, poisoned {}, labels {}",
            clean.len(),
            poisoned.len(),
            labels.len()
        )));
    }
    let a = plugin_mi(&JointCountTable::from_pairs(labels, clean)?)?;
    let b = plugin_mi(&JointCountTable::from_pairs(labels, poisoned)?)?;
    Ok((a - b).abs())
}

/// Value stored for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Domain(format!(
            "cannot compare images of {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(1/MSE)` for data in `[0,1]`; infinite when identical.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn cap_psnr(v: f64) -> f64 {
    v.min(PSNR_CAP)
}

/// Fraction of positions where the two sequences agree.
pub fn agreement(pred: &[usize], truth: &[usize]) -> Option<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return None;
    }
    Some(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Fraction of predictions equal to `target`; `None` with nothing to score.
pub fn target_rate(pred: &[usize], target: usize) -> Option<f64> {
    if pred.is_empty() {
        return None;
    }
    Some(pred.iter().filter(|&&p| p == target).count() as f64 / pred.len() as f64)
}

/// Success metrics of one run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub main_acc: Option<f64>,
    pub attack_metric: Option<f64>,
    pub psnr: Option<f64>,
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain("spearman needs two equal series of length ≥ 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("spearman is undefined for a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Rng;
    use proptest::prelude::*;

    /// Cell loop computing p(a,b)·ln(p(a,b)/(p(a)p(b))) from probabilities.
    fn brute_mi(c: &[Vec<u64>]) -> f64 {
        let n: f64 = c.iter().flatten().map(|&v| v as f64).sum();
        let mut total = 0.0;
        for i in 0..c.len() {
            for j in 0..c[0].len() {
                let pab = c[i][j] as f64 / n;
                if pab == 0.0 {
                    continue;
                }
                let mut pa = 0.0;
                for jj in 0..c[0].len() {
                    pa += c[i][jj] as f64 / n;
                }
                let mut pb = 0.0;
                for row in c {
                    pb += row[j] as f64 / n;
                }
                total += pab * (pab / (pa * pb)).ln();
            }
        }
        total
    }

    #[test]
    fn mi_examples() {
        let ind = JointCountTable::new(vec![vec![25, 25], vec![25, 25]]).unwrap();
        assert!(plugin_mi(&ind).unwrap().abs() < 1e-15);
        let diag = JointCountTable::new(vec![vec![50, 0], vec![0, 50]]).unwrap();
        assert!((plugin_mi(&diag).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let empty = JointCountTable::new(vec![vec![0, 0]]).unwrap();
        assert!(matches!(plugin_mi(&empty), Err(Error::Domain(_))));
    }

    #[test]
    fn mi_matches_cell_loop() {
        let mut rng = Rng::named(5, "mi");
        for _ in 0..100 {
            let (r, c) = (1 + rng.below(5), 1 + rng.below(5));
            let counts: Vec<Vec<u64>> = (0..r)
                .map(|_| (0..c).map(|_| rng.below(30) as u64).collect())
                .collect();
            let t = JointCountTable::new(counts.clone()).unwrap();
            if t.total() == 0 {
                continue;
            }
            assert!((plugin_mi(&t).unwrap() - brute_mi(&counts)).abs() < 1e-9);
        }
    }

    #[test]
    fn bound_examples() {
        let base = BoundInputs {
            i_ht: 0.0,
            i_hptp: 0.0,
            card_t: 4.0,
            min_p: 0.5,
            min_p_prime: 0.5,
            m_count: 1.0,
        };
        assert_eq!(theorem1_rhs(&base).unwrap().total, 0.0);
        let e = BoundInputs {
            m_count: std::f64::consts::E,
            ..base
        };
        assert!((theorem1_rhs(&e).unwrap().total - 1.0).abs() < 1e-15);

        // B2 = 8√(2 ln 2), |T| = 4, I = I' = 0.01, M = 1
        let b = BoundInputs {
            i_ht: 0.01,
            i_hptp: 0.01,
            ..base
        };
        let b2 = 8.0 * (2.0f64 * 2f64.ln()).sqrt();
        let b1 = -b2 * b2.ln();
        let one_side = b1 * 2.0 * 0.1 + b2 * 4f64.powf(0.75) * 0.01f64.powf(0.25);
        let got = theorem1_rhs(&b).unwrap();
        assert!((got.b2 - b2).abs() < 1e-12);
        assert!((got.total - 2.0 * one_side).abs() < 1e-10);

        let bad = BoundInputs { min_p: 0.0, ..base };
        assert!(matches!(theorem1_rhs(&bad), Err(Error::Domain(_))));
    }

    #[test]
    fn bound_constant_b1_is_negative() {
        // min_p ≤ 1 forces B2 ≥ 4√(2 ln 2) > 1
        let b = theorem1_rhs(&BoundInputs {
            i_ht: 1.0,
            i_hptp: 1.0,
            card_t: 2.0,
            min_p: 1.0,
            min_p_prime: 1.0,
            m_count: 1.0,
        })
        .unwrap();
        assert!(b.b1 < 0.0 && b.b3 < 0.0);
        // outside (|T|/I)^¼ ≥ 2·ln B2 the square-root term wins and the
        // value falls as I grows
        let more = theorem1_rhs(&BoundInputs {
            i_ht: 2.0,
            i_hptp: 2.0,
            card_t: 2.0,
            min_p: 1.0,
            min_p_prime: 1.0,
            m_count: 1.0,
        })
        .unwrap();
        assert!(more.total < b.total);
    }

    #[test]
    fn lemma1_examples() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        assert_eq!(lemma1_gap(&labels, &labels, &labels).unwrap(), 0.0);
        let swapped: Vec<usize> = labels.iter().map(|&y| 1 - y).collect();
        assert!(lemma1_gap(&labels, &swapped, &labels).unwrap().abs() < 1e-12);
        assert!(lemma1_gap(&labels[..3], &labels, &labels).is_err());

        let n = 10_000;
        let mut rng = Rng::named(2, "gap");
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let random: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        let gap = lemma1_gap(&y, &random, &y).unwrap();
        assert!((gap - std::f64::consts::LN_2).abs() < 0.05);
    }

    #[test]
    fn psnr_examples() {
        let a = vec![0.3; 16];
        assert_eq!(cap_psnr(psnr(&a, &a).unwrap()), PSNR_CAP);
        let checker: Vec<f64> = (0..16).map(|i| ((i + i / 4) % 2) as f64).collect();
        let half = vec![0.5; 16];
        assert!((psnr(&half, &checker).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!(psnr(&a, &a[..3]).is_err());
    }

    #[test]
    fn rate_helpers() {
        assert_eq!(target_rate(&[], 1), None);
        assert_eq!(target_rate(&[1, 2, 1, 1], 1), Some(0.75));
        assert_eq!(agreement(&[0, 1], &[0, 0]), Some(0.5));
    }

    #[test]
    fn spearman_and_median() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        // ties get average ranks: ranks y = [1.5, 1.5, 3]
        let r = spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 9.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn upper_bound_matches_graph_kl() {
        let mu = Tensor::from_rows(&[[1.0, 0.0], [0.5, -0.3]]).unwrap();
        let lv = Tensor::from_rows(&[[0.0, 1.0], [-0.2, 0.4]]).unwrap();
        let mut g = Graph::new();
        let (m, l) = (g.constant(mu.clone()), g.constant(lv.clone()));
        let kl = g.gaussian_kl(m, l).unwrap();
        assert_eq!(vib_mi_upper_bound(&mu, &lv).unwrap(), g.scalar(kl));
        assert_eq!(
            vib_mi_upper_bound(&Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3, 2])).unwrap(),
            0.0
        );
    }

    fn table_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
            proptest::collection::vec(proptest::collection::vec(0u64..40, c), r)
        })
    }

    /// `(|T|/I)^¼ ≥ 2·ln B2` keeps every partial derivative of the bound
    /// with the sign the statement claims.
    fn in_monotone_regime(b: &BoundInputs) -> bool {
        let c = 4.0 * (2.0 * std::f64::consts::LN_2).sqrt();
        [(b.i_ht, b.min_p), (b.i_hptp, b.min_p_prime)]
            .iter()
            .all(|&(i, p)| i == 0.0 || (b.card_t / i).powf(0.25) >= 2.0 * (c / p).ln())
    }

    proptest! {
        #[test]
        fn mi_symmetric_nonnegative_and_bounded(c in table_strategy()) {
            let t = JointCountTable::new(c).unwrap();
            prop_assume!(t.total() > 0);
            let mi = plugin_mi(&t).unwrap();
            let back = plugin_mi(&t.transpose()).unwrap();
            prop_assert!((mi - back).abs() < 1e-12);
            prop_assert!(mi >= 0.0);
            let (ha, hb) = marginal_entropies(&t);
            prop_assert!(mi <= ha.min(hb) + 1e-9);
        }

        #[test]
        fn psnr_symmetric_and_decreasing_in_mse(
            a in proptest::collection::vec(0.0f64..1.0, 8),
            b in proptest::collection::vec(0.0f64..1.0, 8),
            s in 1.01f64..3.0,
        ) {
            let pa = psnr(&a, &b).unwrap();
            prop_assert_eq!(pa, psnr(&b, &a).unwrap());
            // stretching the difference raises the MSE
            let far: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * (y - x)).collect();
            prop_assume!(mse(&a, &b).unwrap() > 0.0);
            prop_assert!(psnr(&a, &far).unwrap() < pa);
        }

        #[test]
        fn bound_monotone_in_m(m in 1.0f64..100.0, dm in 0.0f64..10.0, i in 0.0f64..1.0) {
            let b = BoundInputs { i_ht: i, i_hptp: i, card_t: 8.0, min_p: 0.5, min_p_prime: 0.5, m_count: m };
            let b2 = BoundInputs { m_count: m + dm, ..b };
            prop_assert!(theorem1_rhs(&b2).unwrap().total >= theorem1_rhs(&b).unwrap().total);
        }

        #[test]
        fn bound_monotone_within_regime(
            i in 0.0f64..0.002, di in 0.0f64..0.002,
            t in 2.0f64..64.0, dt in 0.0f64..8.0,
            p in 0.3f64..1.0, dp in 0.0f64..0.3,
        ) {
            let lo = BoundInputs { i_ht: i, i_hptp: i, card_t: t, min_p: (p + dp).min(1.0), min_p_prime: (p + dp).min(1.0), m_count: 1.0 };
            let hi = BoundInputs { i_ht: i + di, i_hptp: i + di, card_t: t + dt, min_p: p, min_p_prime: p, m_count: 1.0 };
            prop_assume!(in_monotone_regime(&lo) && in_monotone_regime(&hi));
            // the straight path between lo and hi stays inside the regime
            let mid = BoundInputs { i_ht: i + di, i_hptp: i + di, card_t: t, min_p: p, min_p_prime: p, m_count: 1.0 };
            prop_assume!(in_monotone_regime(&mid));
            prop_assert!(theorem1_rhs(&hi).unwrap().total >= theorem1_rhs(&lo).unwrap().total - 1e-12);
        }
    }
}
