//! Dense row-major `f64` matrices, trainable parameters with gradients, the
//! Adam optimizer and a central finite-difference gradient checker.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {op} of {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("degenerate vector: cosine similarity needs non-zero norms")]
    Degenerate,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),
    #[error("buffer of length {len} does not fit a {rows}x{cols} matrix")]
    BadLength { rows: usize, cols: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadLength { rows, cols, len: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::Shape { op: "matmul", lhs: self.shape(), rhs: other.shape() });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`. Each output entry is a single [`dot`] of two rows,
    /// so a row's result does not depend on which other rows are present.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.cols {
            return Err(NumericsError::Shape { op: "matmul_t", lhs: self.shape(), rhs: other.shape() });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn relu(&self) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| relu(x)).collect() }
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Dot product with a fixed accumulation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity `uᵀv / (‖u‖‖v‖)`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, NumericsError> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(NumericsError::Degenerate);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity and its gradients with respect to both arguments.
pub fn cosine_with_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), NumericsError> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(NumericsError::Degenerate);
    }
    let c = dot(u, v) / (nu * nv);
    let du = u.iter().zip(v).map(|(&ui, &vi)| vi / (nu * nv) - c * ui / (nu * nu)).collect();
    let dv = u.iter().zip(v).map(|(&ui, &vi)| ui / (nu * nv) - c * vi / (nv * nv)).collect();
    Ok((c, du, dv))
}

/// Sum of several equal-length vectors whose result does not depend on the
/// order the vectors are given in: each coordinate is summed in ascending
/// value order.
pub fn sum_unordered(terms: &[&[f64]], out: &mut [f64]) {
    match terms.len() {
        0 => out.iter_mut().for_each(|x| *x = 0.0),
        1 => out.copy_from_slice(terms[0]),
        2 => {
            for (o, (a, b)) in out.iter_mut().zip(terms[0].iter().zip(terms[1])) {
                *o = a + b;
            }
        }
        _ => {
            let mut column: Vec<f64> = Vec::with_capacity(terms.len());
            for (j, o) in out.iter_mut().enumerate() {
                column.clear();
                column.extend(terms.iter().map(|t| t[j]));
                column.sort_unstable_by(f64::total_cmp);
                *o = column.iter().sum();
            }
        }
    }
}

/// A named trainable matrix with its gradient buffer.
///
/// Row-sparse parameters (embedding tables) track which rows received
/// gradient so that zeroing and optimizer updates only visit those rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    row_sparse: bool,
    touched: Vec<usize>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param { name: name.into(), value, grad, row_sparse: false, touched: Vec::new() }
    }

    pub fn row_sparse(name: impl Into<String>, value: Matrix) -> Self {
        Param { row_sparse: true, ..Param::new(name, value) }
    }

    pub fn is_row_sparse(&self) -> bool {
        self.row_sparse
    }

    /// Mutable gradient row, recording the row as touched.
    pub fn grad_row_mut(&mut self, i: usize) -> &mut [f64] {
        if self.row_sparse {
            self.touched.push(i);
        }
        self.grad.row_mut(i)
    }

    /// Rows that may hold non-zero gradient, sorted and deduplicated.
    pub fn touched_rows(&mut self) -> &[usize] {
        self.touched.sort_unstable();
        self.touched.dedup();
        &self.touched
    }

    pub fn zero_grad(&mut self) {
        if self.row_sparse {
            let mut touched = std::mem::take(&mut self.touched);
            for &i in &touched {
                self.grad.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
            }
            touched.clear();
            self.touched = touched;
        } else {
            self.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that exposes an ordered list of parameters.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

impl Parameterized for Vec<Param> {
    fn params(&self) -> Vec<&Param> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction.
///
/// Row-sparse parameters are updated lazily: rows whose gradient is
/// entirely zero in a step keep their value and moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl AdamState {
    pub fn new<M: Parameterized + ?Sized>(config: AdamConfig, model: &M) -> Self {
        let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.value.shape()).collect();
        AdamState {
            config,
            t: 0,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    /// Applies one update from the current gradients. Gradients are left in
    /// place; the caller zeroes them.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) -> Result<(), NumericsError> {
        let mut params = model.params_mut();
        assert_eq!(params.len(), self.first.len(), "optimizer state does not match the model");
        for p in params.iter_mut() {
            let finite = if p.row_sparse {
                let rows = p.touched_rows().to_vec();
                rows.iter().all(|&i| p.grad.row(i).iter().all(|x| x.is_finite()))
            } else {
                p.grad.is_finite()
            };
            if !finite {
                return Err(NumericsError::NonFinite(p.name.clone()));
            }
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let update = |theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for k in 0..theta.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for ((p, m), v) in params.iter_mut().zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
            if p.row_sparse {
                let rows = p.touched_rows().to_vec();
                for i in rows {
                    if p.grad.row(i).iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let g = p.grad.row(i).to_vec();
                    update(p.value.row_mut(i), &g, m.row_mut(i), v.row_mut(i));
                }
            } else {
                let Param { value, grad, .. } = &mut **p;
                update(value.data_mut(), grad.data(), m.data_mut(), v.data_mut());
            }
        }
        Ok(())
    }
}

/// One evaluation of a loss for gradient checking: the value plus a
/// pattern describing which piecewise-linear branch every kink-bearing
/// operation (ReLU, hinge, max) took.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub pattern: Vec<bool>,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Probe { value, pattern: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Relative error with a small absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Compares the gradients currently stored in `model` against central
/// differences `(f(θ+δ) − f(θ−δ)) / 2δ`, one coordinate at a time.
///
/// A coordinate is skipped as a kink when the branch pattern at `θ ± 10δ`
/// differs from the pattern at `θ`.
pub fn grad_check<M, F>(model: &mut M, mut loss: F, delta: f64, tol: f64) -> GradCheckReport
where
    M: Parameterized,
    F: FnMut(&M) -> Probe,
{
    let base = loss(model);
    let analytic: Vec<(String, Vec<f64>)> =
        model.params().iter().map(|p| (p.name.clone(), p.grad.data().to_vec())).collect();
    let mut report = GradCheckReport { checked: 0, skipped_kinks: 0, max_rel_error: 0.0, worst: None, tol };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let original = model.params()[pi].value.data()[k];
            let mut eval_at = |model: &mut M, x: f64| {
                model.params_mut()[pi].value.data_mut()[k] = x;
                loss(model)
            };
            let far_hi = eval_at(model, original + 10.0 * delta);
            let far_lo = eval_at(model, original - 10.0 * delta);
            let hi = eval_at(model, original + delta);
            let lo = eval_at(model, original - delta);
            model.params_mut()[pi].value.data_mut()[k] = original;
            let kinked = [&far_hi, &far_lo, &hi, &lo].iter().any(|p| p.pattern != base.pattern);
            if kinked {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (hi.value - lo.value) / (2.0 * delta);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_cases() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[vec![17.0], vec![39.0]]).unwrap());
        let m = Matrix::from_rows(&[vec![1.5, -2.0, 0.0], vec![4.0, 5.0, 6.0], vec![-7.0, 8.0, 9.0]]).unwrap();
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
        assert_eq!(Matrix::zeros(3, 3).matmul(&m).unwrap(), Matrix::zeros(3, 3));
        assert!(matches!(a.matmul(&m), Err(NumericsError::Shape { .. })));
        // matmul_t agrees with matmul against an explicit transpose
        let bt = Matrix::from_rows(&[vec![5.0, 6.0]]).unwrap();
        assert_eq!(a.matmul_t(&bt).unwrap(), a.matmul(&b).unwrap());
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(2.5), 2.5);
        let m = Matrix::from_rows(&[vec![-1.0, 3.0]]).unwrap();
        assert_eq!(m.relu(), Matrix::from_rows(&[vec![0.0, 3.0]]).unwrap());
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(NumericsError::Degenerate));
    }

    #[test]
    fn unordered_sum_ignores_order() {
        let a = [0.1, 1e16, -3.0];
        let b = [0.2, 1.0, 7.0];
        let c = [0.3, -1e16, 1e-9];
        let mut x = [0.0; 3];
        let mut y = [0.0; 3];
        sum_unordered(&[&a, &b, &c], &mut x);
        sum_unordered(&[&c, &a, &b], &mut y);
        assert_eq!(x, y);
    }

    fn scalar(v: f64) -> Vec<Param> {
        vec![Param::new("theta", Matrix::from_vec(1, 1, vec![v]).unwrap())]
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.0, -0.25] {
            let mut p = scalar(1.0);
            let mut adam = AdamState::new(AdamConfig { eps: 0.0, ..AdamConfig::default() }, &p);
            p[0].grad.set(0, 0, g);
            adam.step(&mut p).unwrap();
            let moved = p[0].value.get(0, 0) - 1.0;
            assert!((moved + 0.01 * g.signum()).abs() < 1e-12, "moved {moved}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_value() {
        let mut p = scalar(2.0);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p).unwrap();
        assert_eq!(p[0].value.get(0, 0), 2.0);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = scalar(2.0);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        p[0].grad.set(0, 0, f64::NAN);
        assert_eq!(adam.step(&mut p), Err(NumericsError::NonFinite("theta".into())));
        assert_eq!(p[0].value.get(0, 0), 2.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = scalar(0.5);
            let mut adam = AdamState::new(AdamConfig::default(), &p);
            for i in 0..10 {
                p[0].grad.set(0, 0, (i as f64).sin());
                adam.step(&mut p).unwrap();
            }
            p[0].value.get(0, 0)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn sparse_rows_skip_untouched() {
        let mut p = vec![Param::row_sparse("table", Matrix::from_vec(3, 2, vec![1.0; 6]).unwrap())];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        p[0].grad_row_mut(1)[0] = 1.0;
        adam.step(&mut p).unwrap();
        p.zero_grad();
        assert_eq!(p[0].value.row(0), &[1.0, 1.0]);
        assert_ne!(p[0].value.row(1)[0], 1.0);
        assert_eq!(p[0].value.row(1)[1], 1.0);
        assert!(p[0].grad.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grad_check_quadratic() {
        let mut p = scalar(3.0);
        p[0].grad.set(0, 0, 6.0);
        let report = grad_check(&mut p, |m: &Vec<Param>| Probe::smooth(m[0].value.get(0, 0).powi(2)), 1e-5, 1e-4);
        assert!(report.passed());
        assert!(report.max_rel_error * 6.0 < 1e-6);
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn grad_check_constant_loss() {
        let mut p = scalar(3.0);
        let report = grad_check(&mut p, |_: &Vec<Param>| Probe::smooth(4.2), 1e-5, 1e-4);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn cosine_gradient_matches_differences() {
        let u = [0.3, -1.2, 0.7];
        let v = [1.1, 0.4, -0.5];
        let (_, du, dv) = cosine_with_grad(&u, &v).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut up = u;
            let mut dn = u;
            up[k] += h;
            dn[k] -= h;
            let num = (cosine(&up, &v).unwrap() - cosine(&dn, &v).unwrap()) / (2.0 * h);
            assert!(relative_error(du[k], num) < 1e-6);
            let mut vp = v;
            let mut vn = v;
            vp[k] += h;
            vn[k] -= h;
            let num = (cosine(&u, &vp).unwrap() - cosine(&u, &vn).unwrap()) / (2.0 * h);
            assert!(relative_error(dv[k], num) < 1e-6);
        }
    }
}
