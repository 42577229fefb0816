use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::DomainBox;

/// Settings for [`minimize_box`].
#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeOptions {
    /// Number of starting points: the box center plus `starts - 1`
    /// Latin-hypercube draws.
    pub starts: usize,
    pub seed: u64,
    /// Simplex iterations per start.
    pub max_iter: usize,
    /// Simplex diameter tolerance in unit-box coordinates.
    pub xtol: f64,
    /// Relative spread of simplex values.
    pub ftol: f64,
    /// Projected-gradient tolerance of the polish, relative to `1 + |f|`.
    pub gtol: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            starts: 10,
            seed: 0,
            max_iter: 5000,
            xtol: 1e-10,
            ftol: 1e-12,
            gtol: 1e-8,
        }
    }
}

impl MinimizeOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_starts(mut self, starts: usize) -> Self {
        self.starts = starts;
        self
    }
}

/// Best local optimum found by [`minimize_box`].
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub argmin: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub evaluations: usize,
}

/// `m` Latin-hypercube points in the unit cube `[0, 1]^dim`.
pub fn latin_hypercube(m: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dim]; m];
    let mut perm: Vec<usize> = (0..m).collect();
    for j in 0..dim {
        perm.shuffle(rng);
        for (i, point) in points.iter_mut().enumerate() {
            point[j] = (perm[i] as f64 + rng.random::<f64>()) / m as f64;
        }
    }
    points
}

/// Objective in unit-box coordinates, counting evaluations and mapping
/// NaN to +∞.
struct Scaled<'a, F> {
    f: F,
    domain: &'a DomainBox,
    evals: usize,
}

impl<F: Fn(&[f64]) -> f64> Scaled<'_, F> {
    fn to_box(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, &uj)| {
                let v = self.domain.lower()[j] + uj * self.domain.width(j);
                v.clamp(self.domain.lower()[j], self.domain.upper()[j])
            })
            .collect()
    }

    fn eval(&mut self, u: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(&self.to_box(u));
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

fn clamp_unit(u: &mut [f64]) {
    for v in u.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Bounded Nelder–Mead on the unit cube. Returns (point, value, converged).
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    obj: &mut Scaled<'_, F>,
    start: &[f64],
    opts: &MinimizeOptions,
) -> (Vec<f64>, f64, bool) {
    let p = start.len();
    let step = 0.1;
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(p + 1);
    simplex.push(start.to_vec());
    for i in 0..p {
        let mut v = start.to_vec();
        v[i] = if v[i] + step <= 1.0 {
            v[i] + step
        } else {
            v[i] - step
        };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| obj.eval(v)).collect();

    let (alpha, gamma, rho, shrink) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let mut order: Vec<usize> = (0..=p).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let best = values[0];
        let worst = values[p];
        let diameter = simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        let spread_ok = (worst - best).abs() <= opts.ftol * (1.0 + best.abs());
        if (diameter <= opts.xtol && spread_ok) || diameter <= 1e-3 * opts.xtol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; p];
        for v in &simplex[..p] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / p as f64;
            }
        }
        let along = |coef: f64| -> Vec<f64> {
            let mut v: Vec<f64> = centroid
                .iter()
                .zip(&simplex[p])
                .map(|(c, w)| c + coef * (c - w))
                .collect();
            clamp_unit(&mut v);
            v
        };

        let xr = along(alpha);
        let fr = obj.eval(&xr);
        if fr < values[0] {
            let xe = along(gamma);
            let fe = obj.eval(&xe);
            if fe < fr {
                simplex[p] = xe;
                values[p] = fe;
            } else {
                simplex[p] = xr;
                values[p] = fr;
            }
        } else if fr < values[p - 1] {
            simplex[p] = xr;
            values[p] = fr;
        } else {
            let (xc, fc) = if fr < values[p] {
                let xc = along(rho * alpha);
                let fc = obj.eval(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = obj.eval(&xc);
                (xc, fc)
            };
            if fc < values[p].min(fr) {
                simplex[p] = xc;
                values[p] = fc;
            } else {
                for i in 1..=p {
                    let v: Vec<f64> = simplex[0]
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, x)| b + shrink * (x - b))
                        .collect();
                    values[i] = obj.eval(&v);
                    simplex[i] = v;
                }
            }
        }
    }
    let (ibest, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty simplex");
    (simplex[ibest].clone(), values[ibest], converged)
}

/// Central-difference gradient in unit coordinates, one-sided at faces.
fn fd_gradient<F: Fn(&[f64]) -> f64>(obj: &mut Scaled<'_, F>, u: &[f64]) -> DVector<f64> {
    let p = u.len();
    let h0 = f64::EPSILON.cbrt();
    let mut g = DVector::zeros(p);
    let mut work = u.to_vec();
    for i in 0..p {
        let h = h0 * u[i].abs().max(1.0);
        let hi = (u[i] + h).min(1.0);
        let lo = (u[i] - h).max(0.0);
        work[i] = hi;
        let fp = obj.eval(&work);
        work[i] = lo;
        let fm = obj.eval(&work);
        work[i] = u[i];
        g[i] = (fp - fm) / (hi - lo);
    }
    g
}

fn projected(u: &[f64], g: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        g.len(),
        g.iter().enumerate().map(|(i, &gi)| {
            if (u[i] <= 0.0 && gi > 0.0) || (u[i] >= 1.0 && gi < 0.0) {
                0.0
            } else {
                gi
            }
        }),
    )
}

/// Projected BFGS polish. Returns (point, value, gradient criterion met).
fn polish<F: Fn(&[f64]) -> f64>(
    obj: &mut Scaled<'_, F>,
    start: Vec<f64>,
    f_start: f64,
    opts: &MinimizeOptions,
) -> (Vec<f64>, f64, bool) {
    let p = start.len();
    let mut u = start;
    let mut fu = f_start;
    if !fu.is_finite() {
        return (u, fu, false);
    }
    let mut h_inv = DMatrix::<f64>::identity(p, p);
    let mut g = fd_gradient(obj, &u);
    for _ in 0..100 {
        let pg = projected(&u, &g);
        if pg.amax() <= opts.gtol * (1.0 + fu.abs()) {
            return (u, fu, true);
        }
        let mut d = -(&h_inv * &pg);
        if d.dot(&pg) >= 0.0 {
            h_inv = DMatrix::identity(p, p);
            d = -pg.clone();
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = u.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
            clamp_unit(&mut trial);
            let step = DVector::from_iterator(p, trial.iter().zip(&u).map(|(a, b)| a - b));
            if step.amax() == 0.0 {
                break;
            }
            let ft = obj.eval(&trial);
            if ft <= fu + 1e-4 * pg.dot(&step) {
                accepted = Some((trial, ft, step));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, ft, s)) = accepted else {
            break;
        };
        let g_new = fd_gradient(obj, &trial);
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-16 * s.norm() * y.norm() && sy > 0.0 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(p, p);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            h_inv = &left * &h_inv * &right + rho * &s * s.transpose();
        }
        let improvement = fu - ft;
        u = trial;
        fu = ft;
        g = g_new;
        if improvement <= 1e-16 * (1.0 + fu.abs()) {
            break;
        }
    }
    let pg = projected(&u, &g);
    let ok = pg.amax() <= opts.gtol * (1.0 + fu.abs());
    (u, fu, ok)
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Multi-start bounded minimization: simplex search from the box center and
/// Latin-hypercube starts, each followed by a projected quasi-Newton polish
/// with finite-difference gradients.
///
/// Deterministic for a given `opts.seed`. Ties in value are broken by the
/// lexicographically smallest argmin.
pub fn minimize_box<F>(f: F, domain: &DomainBox, opts: &MinimizeOptions) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64,
{
    if opts.starts == 0 {
        return Err(Error::Parameter(
            "minimize_box needs at least one start".into(),
        ));
    }
    let p = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![vec![0.5; p]];
    if opts.starts > 1 {
        starts.extend(latin_hypercube(opts.starts - 1, p, &mut rng));
    }

    let mut obj = Scaled {
        f,
        domain,
        evals: 0,
    };
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for start in &starts {
        let (u, fu, nm_ok) = nelder_mead(&mut obj, start, opts);
        let (u, fu, grad_ok) = polish(&mut obj, u, fu, opts);
        let x = obj.to_box(&u);
        let candidate = (x, fu, nm_ok || grad_ok);
        let better = match &best {
            None => true,
            Some((bx, bf, _)) => match candidate.1.total_cmp(bf) {
                Ordering::Less => true,
                Ordering::Equal => lexicographic(&candidate.0, bx) == Ordering::Less,
                Ordering::Greater => false,
            },
        };
        if better {
            best = Some(candidate);
        }
    }
    let (argmin, value, converged) = best.expect("at least one start");
    Ok(Minimum {
        argmin,
        value,
        converged: converged && value.is_finite(),
        evaluations: obj.evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_in_one_dimension() {
        let b = DomainBox::interval(2.0, 4.0).unwrap();
        let m = minimize_box(|t| (t[0] - 3.5).powi(2), &b, &MinimizeOptions::default()).unwrap();
        assert!(m.converged);
        assert!((m.argmin[0] - 3.5).abs() < 1e-8, "{}", m.argmin[0]);
    }

    #[test]
    fn zero_bias_l2_loss() {
        use crate::numerics::{build_rule, integrate};
        let rule = build_rule(&DomainBox::interval(0.0, 1.0).unwrap(), 64).unwrap();
        let b = DomainBox::interval(2.0, 6.0).unwrap();
        let f = |t: &[f64]| integrate(|x| (4.0 * x[0] - t[0] * x[0]).powi(2), &rule).unwrap();
        let m = minimize_box(f, &b, &MinimizeOptions::default()).unwrap();
        assert!((m.argmin[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn bound_constrained_optimum_sits_on_face() {
        let b = DomainBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let m = minimize_box(
            |t| (t[0] + 1.0).powi(2) + (t[1] - 0.25).powi(2),
            &b,
            &MinimizeOptions::default(),
        )
        .unwrap();
        assert_eq!(m.argmin[0], 0.0);
        assert!((m.argmin[1] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn rosenbrock_in_box() {
        let b = DomainBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let m = minimize_box(
            |t| 100.0 * (t[1] - t[0] * t[0]).powi(2) + (1.0 - t[0]).powi(2),
            &b,
            &MinimizeOptions::default(),
        )
        .unwrap();
        assert!(
            (m.argmin[0] - 1.0).abs() < 1e-5 && (m.argmin[1] - 1.0).abs() < 1e-5,
            "{m:?}"
        );
    }

    #[test]
    fn multimodal_finds_global() {
        let b = DomainBox::interval(0.0, 10.0).unwrap();
        let f = |t: &[f64]| (3.0 * t[0]).sin() + 0.1 * (t[0] - 7.0).powi(2);
        let m = minimize_box(f, &b, &MinimizeOptions::default()).unwrap();
        let grid_best = (0..=100_000)
            .map(|i| i as f64 * 1e-4)
            .min_by(|a, b| f(&[*a]).total_cmp(&f(&[*b])))
            .unwrap();
        assert!((m.argmin[0] - grid_best).abs() < 1e-3);
    }

    #[test]
    fn deterministic_given_seed() {
        let b = DomainBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let f = |t: &[f64]| (t[0] * 3.0).cos() * (t[1] * 2.0).sin() + t[0] * t[0];
        let o = MinimizeOptions::default().with_seed(42);
        let a = minimize_box(f, &b, &o).unwrap();
        let c = minimize_box(f, &b, &o).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn non_finite_objective_reports_not_converged() {
        let b = DomainBox::interval(0.0, 1.0).unwrap();
        let m = minimize_box(|_| f64::NAN, &b, &MinimizeOptions::default()).unwrap();
        assert!(!m.converged);
        assert!(b.contains(&m.argmin));
    }

    #[test]
    fn zero_starts_rejected() {
        let b = DomainBox::interval(0.0, 1.0).unwrap();
        assert!(minimize_box(|t| t[0], &b, &MinimizeOptions::default().with_starts(0)).is_err());
    }

    #[test]
    fn latin_hypercube_stratifies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = latin_hypercube(10, 3, &mut rng);
        for j in 0..3 {
            let mut bins: Vec<usize> = pts.iter().map(|p| (p[j] * 10.0) as usize).collect();
            bins.sort_unstable();
            assert_eq!(bins, (0..10).collect::<Vec<_>>());
        }
    }
}
