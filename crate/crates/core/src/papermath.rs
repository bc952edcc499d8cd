//! Small numeric kernels: the reversible-column recurrence and its inverse,
//! relative-position-bias attention scores, and the adaptive angular margin
//! triplet loss with its analytic gradient.
//!
//! [`run_suite`] bundles the property checks behind `dmsort mathcheck`.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alpha must be nonzero")]
    ZeroAlpha,
    #[error("bias index out of range: head {head}, dx {dx}, dy {dy}")]
    IndexOutOfRange { head: usize, dx: usize, dy: usize },
    #[error("vector {0} is not unit norm")]
    NonUnitVector(&'static str),
    #[error("numerical singularity: |a·p| = {0}")]
    NumericalSingularity(f64),
    #[error("vector lengths differ")]
    DimensionMismatch,
}

/// Row-major 2-D feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// A feature map at one pyramid level of one column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnFeature {
    pub grid: Grid,
    pub level: usize,
    pub column: usize,
}

impl ColumnFeature {
    pub fn new(grid: Grid, level: usize, column: usize) -> Self {
        Self { grid, level, column }
    }
}

/// Coupling operators. `phi` is a zero-padded 3×3 cross-correlation plus
/// bias followed by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct RevColOps {
    pub alpha: f64,
    pub kernel: [[f64; 3]; 3],
    pub bias: f64,
}

impl RevColOps {
    pub fn random(alpha: f64, rng: &mut impl Rng) -> Self {
        let mut kernel = [[0.0; 3]; 3];
        for row in &mut kernel {
            for v in row.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        Self { alpha, kernel, bias: rng.random_range(-0.1..0.1) }
    }

    pub fn phi(&self, x: &Grid) -> Grid {
        let (rows, cols) = x.shape();
        Grid::from_fn(rows, cols, |r, c| {
            let mut acc = self.bias;
            for (i, krow) in self.kernel.iter().enumerate() {
                for (j, k) in krow.iter().enumerate() {
                    let (rr, cc) = (r as isize + i as isize - 1, c as isize + j as isize - 1);
                    if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
                        acc += k * x.get(rr as usize, cc as usize);
                    }
                }
            }
            acc.tanh()
        })
    }
}

/// 2× average-pool.
pub fn downsample(x: &Grid) -> Result<Grid, MathError> {
    let (rows, cols) = x.shape();
    if rows % 2 != 0 || cols % 2 != 0 {
        return Err(MathError::ShapeMismatch(format!("cannot downsample {rows}x{cols}")));
    }
    Ok(Grid::from_fn(rows / 2, cols / 2, |r, c| {
        0.25 * (x.get(2 * r, 2 * c) + x.get(2 * r + 1, 2 * c) + x.get(2 * r, 2 * c + 1) + x.get(2 * r + 1, 2 * c + 1))
    }))
}

/// 2× nearest-neighbour upsample.
pub fn upsample(x: &Grid) -> Grid {
    let (rows, cols) = x.shape();
    Grid::from_fn(rows * 2, cols * 2, |r, c| x.get(r / 2, c / 2))
}

fn coupling(
    target: (usize, usize),
    below: &ColumnFeature,
    above: Option<&ColumnFeature>,
    ops: &RevColOps,
) -> Result<Grid, MathError> {
    let g = downsample(&below.grid)?;
    if g.shape() != target {
        return Err(MathError::ShapeMismatch(format!(
            "lower level downsamples to {:?}, expected {:?}",
            g.shape(),
            target
        )));
    }
    let mut fused = g;
    if let Some(above) = above {
        let h = upsample(&above.grid);
        if h.shape() != target {
            return Err(MathError::ShapeMismatch(format!(
                "upper level upsamples to {:?}, expected {:?}",
                h.shape(),
                target
            )));
        }
        for (f, v) in fused.data.iter_mut().zip(&h.data) {
            *f += v;
        }
    }
    Ok(ops.phi(&fused))
}

/// `α·x_prev + φ(g(below) + h(above))`; `above = None` is the zero boundary.
pub fn revcol_forward(
    x_prev: &ColumnFeature,
    below: &ColumnFeature,
    above: Option<&ColumnFeature>,
    ops: &RevColOps,
) -> Result<ColumnFeature, MathError> {
    let f = coupling(x_prev.grid.shape(), below, above, ops)?;
    let mut out = x_prev.grid.clone();
    for (o, v) in out.data.iter_mut().zip(&f.data) {
        *o = ops.alpha * *o + v;
    }
    Ok(ColumnFeature::new(out, x_prev.level, x_prev.column + 1))
}

/// Recovers `x_prev` from the forward output.
pub fn revcol_inverse(
    x_out: &ColumnFeature,
    below: &ColumnFeature,
    above: Option<&ColumnFeature>,
    ops: &RevColOps,
) -> Result<ColumnFeature, MathError> {
    if ops.alpha == 0.0 {
        return Err(MathError::ZeroAlpha);
    }
    let f = coupling(x_out.grid.shape(), below, above, ops)?;
    let mut out = x_out.grid.clone();
    for (o, v) in out.data.iter_mut().zip(&f.data) {
        *o = (*o - v) / ops.alpha;
    }
    Ok(ColumnFeature::new(out, x_out.level, x_out.column.saturating_sub(1)))
}

/// Bias `b[head][|dx|][|dy|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBiasTable {
    heads: usize,
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl AttentionBiasTable {
    /// Covers displacements `0..nx` by `0..ny`.
    pub fn zeros(heads: usize, nx: usize, ny: usize) -> Self {
        Self { heads, nx, ny, data: vec![0.0; heads * nx * ny] }
    }

    pub fn random(heads: usize, nx: usize, ny: usize, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(heads, nx, ny);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        t
    }

    fn index(&self, head: usize, dx: usize, dy: usize) -> Result<usize, MathError> {
        if head >= self.heads || dx >= self.nx || dy >= self.ny {
            return Err(MathError::IndexOutOfRange { head, dx, dy });
        }
        Ok((head * self.nx + dx) * self.ny + dy)
    }

    pub fn get(&self, head: usize, dx: usize, dy: usize) -> Result<f64, MathError> {
        self.index(head, dx, dy).map(|i| self.data[i])
    }

    pub fn set(&mut self, head: usize, dx: usize, dy: usize, v: f64) -> Result<(), MathError> {
        let i = self.index(head, dx, dy)?;
        self.data[i] = v;
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn attention_score(
    q: &[f64],
    k: &[f64],
    pos_q: (i64, i64),
    pos_k: (i64, i64),
    head: usize,
    bias: &AttentionBiasTable,
) -> Result<f64, MathError> {
    if q.len() != k.len() {
        return Err(MathError::DimensionMismatch);
    }
    let dx = pos_q.0.abs_diff(pos_k.0) as usize;
    let dy = pos_q.1.abs_diff(pos_k.1) as usize;
    Ok(dot(q, k) + bias.get(head, dx, dy)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub a: Vec<f64>,
    pub p: Vec<f64>,
    pub n: Vec<f64>,
    /// Additive angular margin on the positive angle, radians.
    pub theta: f64,
    pub alpha_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGradient {
    pub a: Vec<f64>,
    pub p: Vec<f64>,
    pub n: Vec<f64>,
}

impl TripletGradient {
    pub fn norm(&self) -> f64 {
        (dot(&self.a, &self.a) + dot(&self.p, &self.p) + dot(&self.n, &self.n)).sqrt()
    }
}

const UNIT_TOL: f64 = 1e-9;
const SINGULAR_TOL: f64 = 1e-6;

fn check(s: &TripletSample) -> Result<(), MathError> {
    if s.a.len() != s.p.len() || s.a.len() != s.n.len() {
        return Err(MathError::DimensionMismatch);
    }
    for (name, v) in [("a", &s.a), ("p", &s.p), ("n", &s.n)] {
        if (dot(v, v).sqrt() - 1.0).abs() > UNIT_TOL {
            return Err(MathError::NonUnitVector(name));
        }
    }
    Ok(())
}

/// `(d1, d2, θ1 clamped?)` from the two cosines.
fn distances(c1: f64, c2: f64, theta: f64) -> (f64, f64, bool) {
    let raw = c1.clamp(-1.0, 1.0).acos() + theta;
    let theta1 = raw.clamp(0.0, PI);
    (1.0 - theta1.cos(), 1.0 - c2.clamp(-1.0, 1.0), raw != theta1)
}

pub fn ada_loss(s: &TripletSample) -> Result<f64, MathError> {
    check(s)?;
    let (d1, d2, _) = distances(dot(&s.a, &s.p), dot(&s.a, &s.n), s.theta);
    Ok((d1 - d2 + s.alpha_margin).max(0.0).powi(2))
}

/// Gradient of [`ada_loss`] with respect to the raw vectors.
pub fn ada_loss_gradient(s: &TripletSample) -> Result<TripletGradient, MathError> {
    check(s)?;
    let c1 = dot(&s.a, &s.p);
    let c2 = dot(&s.a, &s.n);
    let (d1, d2, clamped) = distances(c1, c2, s.theta);
    let v = d1 - d2 + s.alpha_margin;
    let dim = s.a.len();
    if v <= 0.0 {
        return Ok(TripletGradient { a: vec![0.0; dim], p: vec![0.0; dim], n: vec![0.0; dim] });
    }
    if c1.abs() > 1.0 - SINGULAR_TOL {
        return Err(MathError::NumericalSingularity(c1.abs()));
    }
    let g = 2.0 * v;
    // d1 = 1 - cos(acos(c1) + θ)  ⇒  ∂d1/∂c1 = -sin(θ1) / sqrt(1 - c1²)
    let dd1 = if clamped {
        0.0
    } else {
        let theta1 = c1.acos() + s.theta;
        -theta1.sin() / (1.0 - c1 * c1).sqrt()
    };
    // d2 = 1 - c2
    let dd2 = -1.0;
    Ok(TripletGradient {
        a: (0..dim).map(|i| g * (dd1 * s.p[i] - dd2 * s.n[i])).collect(),
        p: s.a.iter().map(|ai| g * dd1 * ai).collect(),
        n: s.a.iter().map(|ai| -g * dd2 * ai).collect(),
    })
}

pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Outcome of one `mathcheck` suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<10} {} cases={} max_error={:.3e} tolerance={:.0e} time={:.3}s",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.cases,
            self.max_error,
            self.tolerance,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    RevCol,
    AdaLoss,
    Attention,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "revcol" => Ok(Suite::RevCol),
            "adaloss" => Ok(Suite::AdaLoss),
            "attention" => Ok(Suite::Attention),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite '{other}' (expected revcol, adaloss, attention or all)")),
        }
    }
}

/// 100 random 16×16 three-level cases with α in `[0.1, 10]`.
pub fn check_revcol(seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error: f64 = 0.0;
    let mut ok = true;
    let cases = 100;
    for _ in 0..cases {
        let alpha = rng.random_range(0.1..=10.0);
        let ops = RevColOps::random(alpha, &mut rng);
        let x = ColumnFeature::new(Grid::random(16, 16, &mut rng), 1, 1);
        let below = ColumnFeature::new(Grid::random(32, 32, &mut rng), 0, 2);
        let above = ColumnFeature::new(Grid::random(8, 8, &mut rng), 2, 1);
        let boundary = rng.random_bool(0.2);
        let above = (!boundary).then_some(&above);
        match revcol_forward(&x, &below, above, &ops).and_then(|y| revcol_inverse(&y, &below, above, &ops)) {
            Ok(back) => max_error = max_error.max(back.grid.max_abs_diff(&x.grid)),
            Err(_) => ok = false,
        }
    }
    let tolerance = 1e-12;
    SuiteReport {
        name: "revcol",
        cases,
        max_error,
        tolerance,
        passed: ok && max_error <= tolerance,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Loss on raw vectors, no normalisation check; used for finite differences.
fn loss_raw(a: &[f64], p: &[f64], n: &[f64], theta: f64, margin: f64) -> f64 {
    let (d1, d2, _) = distances(dot(a, p), dot(a, n), theta);
    (d1 - d2 + margin).max(0.0).powi(2)
}

/// Draws a triplet whose hinge is active and which sits away from the
/// arccos endpoints and the θ1 clamp.
pub fn random_active_triplet(dim: usize, rng: &mut impl Rng) -> TripletSample {
    loop {
        let a = random_unit(dim, rng);
        let p = random_unit(dim, rng);
        let n = random_unit(dim, rng);
        let theta = rng.random_range(0.0..0.5);
        let alpha_margin = rng.random_range(0.0..0.5);
        let c1 = dot(&a, &p);
        let raw = c1.acos() + theta;
        let s = TripletSample { a, p, n, theta, alpha_margin };
        let v = {
            let (d1, d2, _) = distances(c1, dot(&s.a, &s.n), theta);
            d1 - d2 + alpha_margin
        };
        if v > 1e-3 && c1.abs() < 0.99 && raw < PI - 1e-3 {
            return s;
        }
    }
}

fn central_difference(s: &TripletSample, h: f64) -> TripletGradient {
    let f = |a: &[f64], p: &[f64], n: &[f64]| loss_raw(a, p, n, s.theta, s.alpha_margin);
    let partial = |which: usize| -> Vec<f64> {
        (0..s.a.len())
            .map(|i| {
                let (mut a1, mut p1, mut n1) = (s.a.clone(), s.p.clone(), s.n.clone());
                let (mut a2, mut p2, mut n2) = (s.a.clone(), s.p.clone(), s.n.clone());
                match which {
                    0 => {
                        a1[i] += h;
                        a2[i] -= h;
                    }
                    1 => {
                        p1[i] += h;
                        p2[i] -= h;
                    }
                    _ => {
                        n1[i] += h;
                        n2[i] -= h;
                    }
                }
                (f(&a1, &p1, &n1) - f(&a2, &p2, &n2)) / (2.0 * h)
            })
            .collect()
    };
    TripletGradient { a: partial(0), p: partial(1), n: partial(2) }
}

fn relative_error(x: &TripletGradient, y: &TripletGradient) -> f64 {
    let diff = TripletGradient {
        a: x.a.iter().zip(&y.a).map(|(u, v)| u - v).collect(),
        p: x.p.iter().zip(&y.p).map(|(u, v)| u - v).collect(),
        n: x.n.iter().zip(&y.n).map(|(u, v)| u - v).collect(),
    };
    diff.norm() / x.norm().max(y.norm()).max(1e-12)
}

/// Analytic gradient vs central differences on 1000 active triplets, plus
/// exact zeros for an inactive hinge.
pub fn check_adaloss(seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = 1000;
    let mut max_error: f64 = 0.0;
    let mut ok = true;
    for _ in 0..cases {
        let s = random_active_triplet(8, &mut rng);
        match ada_loss_gradient(&s) {
            Ok(g) => max_error = max_error.max(relative_error(&g, &central_difference(&s, 1e-5))),
            Err(_) => ok = false,
        }
    }
    let a = random_unit(8, &mut rng);
    let inactive = TripletSample { p: a.clone(), n: a.iter().map(|v| -v).collect(), a, theta: 0.0, alpha_margin: 0.1 };
    match ada_loss_gradient(&inactive) {
        Ok(g) => ok &= g.a.iter().chain(&g.p).chain(&g.n).all(|&v| v == 0.0),
        Err(_) => ok = false,
    }
    let tolerance = 1e-4;
    SuiteReport {
        name: "adaloss",
        cases,
        max_error,
        tolerance,
        passed: ok && max_error <= tolerance,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Translation invariance and endpoint symmetry of the bias term.
pub fn check_attention(seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = AttentionBiasTable::random(4, 16, 16, &mut rng);
    let cases = 1000;
    let mut max_error: f64 = 0.0;
    let mut ok = true;
    for _ in 0..cases {
        let q = random_unit(16, &mut rng);
        let k = random_unit(16, &mut rng);
        let head = rng.random_range(0..4);
        let pq = (rng.random_range(0..8), rng.random_range(0..8));
        let pk = (rng.random_range(0..8), rng.random_range(0..8));
        let off = (rng.random_range(-100..100), rng.random_range(-100..100));
        let base = attention_score(&q, &k, pq, pk, head, &table);
        let shifted = attention_score(&q, &k, (pq.0 + off.0, pq.1 + off.1), (pk.0 + off.0, pk.1 + off.1), head, &table);
        let swapped = attention_score(&k, &q, pk, pq, head, &table);
        match (base, shifted, swapped) {
            (Ok(b), Ok(s), Ok(w)) => max_error = max_error.max((b - s).abs()).max((b - w).abs()),
            _ => ok = false,
        }
    }
    ok &= matches!(attention_score(&[1.0], &[1.0], (0, 0), (16, 0), 0, &table), Err(MathError::IndexOutOfRange { .. }));
    let tolerance = 1e-12;
    SuiteReport {
        name: "attention",
        cases,
        max_error,
        tolerance,
        passed: ok && max_error <= tolerance,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Vec<SuiteReport> {
    match suite {
        Suite::RevCol => vec![check_revcol(seed)],
        Suite::AdaLoss => vec![check_adaloss(seed)],
        Suite::Attention => vec![check_attention(seed)],
        Suite::All => vec![check_revcol(seed), check_adaloss(seed), check_attention(seed)],
    }
}
