use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::DomainBox;

/// Gauss–Legendre nodes and weights on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Tricomi's initial guess for the i-th largest root.
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, p_prev) = legendre_pair(n, z);
            dp = nf * (z * p - p_prev) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() <= 1e-16 {
                break;
            }
        }
        let (p, p_prev) = legendre_pair(n, z);
        if p != 0.0 || dp == 0.0 {
            dp = nf * (z * p - p_prev) / (z * z - 1.0);
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// (P_n(z), P_{n-1}(z)) by the three-term recurrence.
fn legendre_pair(n: usize, z: f64) -> (f64, f64) {
    let mut p = 1.0;
    let mut p_prev = 0.0;
    for j in 0..n {
        let jf = j as f64;
        let next = ((2.0 * jf + 1.0) * z * p - jf * p_prev) / (jf + 1.0);
        p_prev = p;
        p = next;
    }
    (p, p_prev)
}

/// Tensor-product Gauss–Legendre rule on a box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureRule {
    dim: usize,
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Iterator over `(node, weight)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.nodes
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }
}

/// Builds the `order`-point-per-dimension tensor Gauss–Legendre rule on `domain`.
pub fn build_rule(domain: &DomainBox, order: usize) -> Result<QuadratureRule> {
    if order < 2 {
        return Err(Error::Parameter(format!(
            "quadrature order must be >= 2, got {order}"
        )));
    }
    let dim = domain.dim();
    let (ref_nodes, ref_weights) = gauss_legendre(order);
    let total = order.pow(dim as u32);
    let mut nodes = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    let mut index = vec![0usize; dim];
    for _ in 0..total {
        let mut w = 1.0;
        for (j, &ij) in index.iter().enumerate() {
            let half = 0.5 * domain.width(j);
            nodes.push(domain.lower()[j] + half * (ref_nodes[ij] + 1.0));
            w *= half * ref_weights[ij];
        }
        weights.push(w);
        // odometer increment, last coordinate fastest
        for j in (0..dim).rev() {
            index[j] += 1;
            if index[j] < order {
                break;
            }
            index[j] = 0;
        }
    }
    Ok(QuadratureRule {
        dim,
        order,
        nodes,
        weights,
    })
}

/// Σ wᵢ f(xᵢ).
pub fn integrate<F>(f: F, rule: &QuadratureRule) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut acc = 0.0;
    for (x, w) in rule.iter() {
        let v = f(x);
        if !v.is_finite() {
            return Err(Error::NonFinite { node: x.to_vec() });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Entrywise integral of a matrix-valued integrand.
pub fn integrate_matrix<F>(f: F, rule: &QuadratureRule) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> DMatrix<f64>,
{
    let mut acc: Option<DMatrix<f64>> = None;
    for (x, w) in rule.iter() {
        let v = f(x);
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite { node: x.to_vec() });
        }
        match acc.as_mut() {
            Some(a) => *a += v * w,
            None => acc = Some(v * w),
        }
    }
    acc.ok_or_else(|| Error::Parameter("empty quadrature rule".into()))
}
