//! Slow, independent reference computations. Test-only.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// How much work an oracle spent on its answer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Resolution(f64),
    Draws(usize),
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    pub budget: Budget,
    pub tolerance: f64,
}

impl OracleResult {
    pub fn agrees(&self, x: f64) -> bool {
        (self.value - x).abs() <= self.tolerance
    }
}

/// Covered cells of a raster with square cells of side `res` anchored at
/// `origin`, counting a cell when its center lies inside any box.
struct Raster {
    origin: (f64, f64),
    res: f64,
    cols: usize,
    rows: usize,
}

impl Raster {
    fn cell_range(lo: f64, hi: f64, origin: f64, res: f64, n: usize) -> std::ops::Range<usize> {
        // centers at origin + (i + 0.5) res; keep lo <= center < hi
        let first = ((lo - origin) / res - 0.5).ceil().max(0.0) as usize;
        let end = (((hi - origin) / res - 0.5).ceil().max(0.0) as usize).min(n);
        first.min(end)..end
    }

    fn paint(&self, boxes: &[[f64; 4]]) -> Vec<bool> {
        let mut bits = vec![false; self.rows * self.cols];
        for b in boxes {
            let xs = Self::cell_range(b[0], b[2], self.origin.0, self.res, self.cols);
            for r in Self::cell_range(b[1], b[3], self.origin.1, self.res, self.rows) {
                bits[r * self.cols + xs.start..r * self.cols + xs.end].fill(true);
            }
        }
        bits
    }
}

/// IoU of two box unions by counting raster cells. The tolerance is the
/// share of cells that can straddle an edge.
pub fn raster_iou(pred: &[[f64; 4]], gold: &[[f64; 4]], res: f64) -> OracleResult {
    let all: Vec<&[f64; 4]> = pred.iter().chain(gold).collect();
    if pred.is_empty() || gold.is_empty() {
        return OracleResult {
            value: 0.0,
            budget: Budget::Resolution(res),
            tolerance: 0.0,
        };
    }
    let x0 = all.iter().map(|b| b[0]).fold(f64::INFINITY, f64::min);
    let y0 = all.iter().map(|b| b[1]).fold(f64::INFINITY, f64::min);
    let x1 = all.iter().map(|b| b[2]).fold(f64::NEG_INFINITY, f64::max);
    let y1 = all.iter().map(|b| b[3]).fold(f64::NEG_INFINITY, f64::max);
    let raster = Raster {
        origin: (x0, y0),
        res,
        cols: ((x1 - x0) / res).ceil() as usize + 1,
        rows: ((y1 - y0) / res).ceil() as usize + 1,
    };
    let p = raster.paint(pred);
    let g = raster.paint(gold);
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in p.iter().zip(&g) {
        inter += (*a && *b) as usize;
        union += (*a || *b) as usize;
    }
    let perimeter: f64 = all.iter().map(|b| 2.0 * ((b[2] - b[0]) + (b[3] - b[1]))).sum();
    let union_area = union as f64 * res * res;
    let value = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    let tolerance = if union == 0 {
        0.0
    } else {
        (2.0 * perimeter * res / union_area).min(1.0)
    };
    OracleResult {
        value,
        budget: Budget::Resolution(res),
        tolerance,
    }
}

/// Area of a union of boxes by rasterization.
pub fn raster_area(boxes: &[[f64; 4]], res: f64) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let x0 = boxes.iter().map(|b| b[0]).fold(f64::INFINITY, f64::min);
    let y0 = boxes.iter().map(|b| b[1]).fold(f64::INFINITY, f64::min);
    let x1 = boxes.iter().map(|b| b[2]).fold(f64::NEG_INFINITY, f64::max);
    let y1 = boxes.iter().map(|b| b[3]).fold(f64::NEG_INFINITY, f64::max);
    let raster = Raster {
        origin: (x0, y0),
        res,
        cols: ((x1 - x0) / res).ceil() as usize + 1,
        rows: ((y1 - y0) / res).ceil() as usize + 1,
    };
    raster.paint(boxes).iter().filter(|b| **b).count() as f64 * res * res
}

fn ngrams(tokens: &[&str], n: usize) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        *out.entry(tokens[i..i + n].join("\u{1f}")).or_insert(0) += 1;
        i += 1;
    }
    out
}

/// Add-one smoothed sentence BLEU-4 with brevity penalty, as a product of
/// precisions rather than a log-sum.
pub fn reference_bleu(candidate: &[&str], reference: &[&str]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=4 {
        let c = ngrams(candidate, n);
        let r = ngrams(reference, n);
        let mut matched = 0;
        let mut total = 0;
        for (g, count) in &c {
            total += count;
            matched += (*count).min(*r.get(g).unwrap_or(&0));
        }
        product *= (matched as f64 + 1.0) / (total as f64 + 1.0);
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * product.powf(0.25)
}

/// LCS length by memoized recursion over suffixes.
pub fn reference_lcs(a: &[&str], b: &[&str]) -> usize {
    fn go(a: &[&str], b: &[&str], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn reference_rouge_l(candidate: &[&str], reference: &[&str]) -> f64 {
    let l = reference_lcs(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Sample variance of `Σ β_k X_k` for Gaussian `X` with the given variances
/// and correlation matrix. Rejects correlation matrices that are not PSD.
pub fn mc_weighted_variance(
    vars: &[f64],
    corr: &[Vec<f64>],
    weights: &[f64],
    draws: usize,
    seed: u64,
) -> Result<OracleResult, String> {
    let k = vars.len();
    // Cholesky that tolerates zero pivots, so ρ = 1 input works
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..j).map(|m| l[i][m] * l[j][m]).sum();
            if i == j {
                let d = corr[i][i] - s;
                if d < -1e-12 {
                    return Err(format!("correlation matrix not PSD at {i}"));
                }
                l[i][i] = d.max(0.0).sqrt();
            } else if l[j][j] > 1e-12 {
                l[i][j] = (corr[i][j] - s) / l[j][j];
            } else if (corr[i][j] - s).abs() > 1e-9 {
                return Err(format!("correlation matrix not PSD at ({i},{j})"));
            }
        }
    }
    let sd: Vec<f64> = vars.iter().map(|v| v.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; k];
    let (mut n, mut m, mut m2) = (0.0, 0.0, 0.0);
    for _ in 0..draws {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        let mut y = 0.0;
        for i in 0..k {
            let xi: f64 = (0..=i).map(|j| l[i][j] * z[j]).sum::<f64>() * sd[i];
            y += weights[i] * xi;
        }
        n += 1.0;
        let d = y - m;
        m += d / n;
        m2 += d * (y - m);
    }
    Ok(OracleResult {
        value: m2 / n,
        budget: Budget::Draws(draws),
        tolerance: 1e-2,
    })
}

/// Plug-in covariance computed column pair by column pair.
pub fn two_pass_cov(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let k = rows[0].len();
    let means: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    (0..k)
        .map(|a| {
            (0..k)
                .map(|b| rows.iter().map(|r| (r[a] - means[a]) * (r[b] - means[b])).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Total population variance and its split, each computed from scratch.
pub fn direct_total_variance(values: &[f64], labels: &[usize]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let grand = values.iter().sum::<f64>() / n;
    let total = values.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / n;
    let mut by: HashMap<usize, Vec<f64>> = HashMap::new();
    for (v, l) in values.iter().zip(labels) {
        by.entry(*l).or_default().push(*v);
    }
    let mut intra = 0.0;
    let mut inter = 0.0;
    for members in by.values() {
        let c = members.len() as f64;
        let m = members.iter().sum::<f64>() / c;
        intra += members.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        inter += c * (m - grand).powi(2) / n;
    }
    (total, intra, inter)
}

/// Attention aggregation with explicit loops over every index.
#[allow(clippy::too_many_arguments)]
pub fn naive_aggregate(
    values: &[f64],
    layers: usize,
    heads: usize,
    tokens: usize,
    seq: usize,
    vs: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut grid = vec![0.0; h * w];
    for l in 0..layers {
        for k in 0..heads {
            for a in 0..tokens {
                for i in 0..h {
                    for j in 0..w {
                        let pos = vs + i * w + j;
                        grid[i * w + j] += values[((l * heads + k) * tokens + a) * seq + pos];
                    }
                }
            }
        }
    }
    let total: f64 = grid.iter().sum();
    grid.iter().map(|g| g / total).collect()
}

/// Masked share by direct summation.
pub fn direct_rad(grid: &[f64], mask: &[bool]) -> f64 {
    let mut inside = 0.0;
    let mut all = 0.0;
    for (g, m) in grid.iter().zip(mask) {
        all += g;
        if *m {
            inside += g;
        }
    }
    inside / all
}
