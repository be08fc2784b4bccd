use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Settings for [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step, in `[1e-5, 1e-2]`.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements_per_param: Option<usize>,
    /// Relative-error denominators are floored at this fraction of the largest
    /// numerical gradient magnitude seen, so that near-zero entries are judged
    /// on an absolute scale.
    pub floor_frac: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            tol: 1e-3,
            max_elements_per_param: None,
            floor_frac: 1e-3,
        }
    }
}

impl GradCheckOptions {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheckOptions {
            eps,
            tol,
            ..Default::default()
        }
    }

    /// f32 forward passes: the loss itself is rounded to ~6e-8 relative, so the
    /// step is large and tiny entries are judged against 10% of the largest one.
    pub fn f32_default() -> Self {
        GradCheckOptions {
            eps: 1e-2,
            tol: 1e-3,
            max_elements_per_param: None,
            floor_frac: 0.1,
        }
    }

    /// f32 gradients judged against f64 central differences.
    pub fn mixed_default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-3,
            max_elements_per_param: None,
            floor_frac: 1e-3,
        }
    }

    pub fn f64_default() -> Self {
        GradCheckOptions {
            eps: 3e-5,
            tol: 1e-5,
            max_elements_per_param: None,
            floor_frac: 1e-3,
        }
    }

    pub fn max_elements(mut self, n: usize) -> Self {
        self.max_elements_per_param = Some(n);
        self
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub checked: usize,
    /// Elements passed over because `x ± eps` crosses a kink.
    pub straddled: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn straddled(&self) -> usize {
        self.params.iter().map(|p| p.straddled).sum()
    }
}

/// Loss value and kink pattern of one evaluation.
fn evaluate<T, F>(f: &F, params: &[Tensor<T>]) -> Result<(f64, u64)>
where
    T: Element,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    Ok((loss.item(), tape.kink_pattern()))
}

fn selected(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(m) if m < len => (0..m).map(|j| j * len / m).collect(),
        _ => (0..len).collect(),
    }
}

fn check_eps(opts: &GradCheckOptions) -> Result<()> {
    if !(1e-5..=1e-2).contains(&opts.eps) {
        return Err(Error::InvalidArgument(format!(
            "eps {} outside [1e-5, 1e-2]",
            opts.eps
        )));
    }
    Ok(())
}

/// Reverse-mode gradients of `f` at `params`, as f64, after confirming that
/// `f` evaluates identically three times.
fn analytic<T, F>(f: &F, params: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Element,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let base = loss.item();
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match grads.take(v) {
            Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();
    for _ in 0..2 {
        let (again, _) = evaluate(f, params)?;
        if again.to_bits() != base.to_bits() {
            return Err(Error::GradCheck(format!(
                "function is not deterministic: {base} then {again}"
            )));
        }
    }
    Ok(out)
}

/// `(element, analytic, numeric)` triples and the straddle count, per parameter.
type Pairs = Vec<(Vec<(usize, f64, f64)>, usize)>;

fn numeric<U, G>(g: &G, params: &[Tensor<U>], analytic: &[Vec<f64>], opts: &GradCheckOptions) -> Result<Pairs>
where
    U: Element,
    G: for<'t> Fn(&'t Tape<U>, &[Var<'t, U>]) -> Result<Var<'t, U>>,
{
    let mut pairs = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<U>> = params.to_vec();
    let (_, base) = evaluate(g, params)?;
    for (pi, p) in params.iter().enumerate() {
        let (mut rows, mut straddled) = (Vec::new(), 0);
        let picks = selected(p.len(), opts.max_elements_per_param);
        for (k, &start) in picks.iter().enumerate() {
            // A probe whose step changes the kink pattern measures a chord
            // across two pieces; move to the next element instead.
            let end = picks.get(k + 1).copied().unwrap_or(p.len());
            for i in start..end {
                let x = p.data()[i];
                let hi = x + U::of(opts.eps);
                let lo = x - U::of(opts.eps);
                work[pi].data_mut()[i] = hi;
                let (f_hi, k_hi) = evaluate(g, &work)?;
                work[pi].data_mut()[i] = lo;
                let (f_lo, k_lo) = evaluate(g, &work)?;
                work[pi].data_mut()[i] = x;
                if k_hi != base || k_lo != base {
                    straddled += 1;
                    continue;
                }
                // Divide by the step actually representable in U.
                let step = hi.as_f64() - lo.as_f64();
                rows.push((i, analytic[pi][i], (f_hi - f_lo) / step));
                break;
            }
        }
        pairs.push((rows, straddled));
    }
    Ok(pairs)
}

fn report(pairs: Pairs, opts: &GradCheckOptions) -> GradCheckReport {
    let scale = pairs
        .iter()
        .flat_map(|(rows, _)| rows)
        .map(|&(_, a, n)| a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let floor = (scale * opts.floor_frac).max(f64::MIN_POSITIVE);

    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
        tol: opts.tol,
        passed: true,
    };
    for (index, (rows, straddled)) in pairs.into_iter().enumerate() {
        let mut check = ParamCheck {
            index,
            checked: rows.len(),
            straddled,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, a, n) in rows {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = err;
                check.worst_element = i;
                check.analytic = a;
                check.numeric = n;
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    report.passed = report.max_rel_error <= opts.tol && report.checked() > 0;
    report
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences of the same function, both evaluated in `T`.
///
/// `f` receives one leaf per entry of `params` and must return a scalar.
/// Elements whose perturbation moves any `relu`, `clamp_max` or `sqrt` input
/// across its kink are skipped in favour of the next element and counted in
/// [`ParamCheck::straddled`].
pub fn finite_difference_check<T, F>(
    f: F,
    params: &[Tensor<T>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Element,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    check_eps(opts)?;
    let grads = analytic(&f, params)?;
    Ok(report(numeric(&f, params, &grads, opts)?, opts))
}

/// Checks f32 reverse-mode gradients against central differences of the same
/// function re-executed in f64. `f32_fn` and `f64_fn` must compute the same
/// expression.
pub fn mixed_precision_check<F, G>(
    f32_fn: F,
    f64_fn: G,
    params: &[Tensor<f32>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f32>, &[Var<'t, f32>]) -> Result<Var<'t, f32>>,
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_eps(opts)?;
    let grads = analytic(&f32_fn, params)?;
    let wide: Vec<Tensor<f64>> = params.iter().map(|p| p.cast()).collect();
    Ok(report(numeric(&f64_fn, &wide, &grads, opts)?, opts))
}
