//! Bracketed scalar root finding (Brent 1973).

/// Stopping rule: `|f(x)| < f_tol` or bracket width below `x_tol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootOptions {
    pub f_tol: f64,
    pub x_tol: f64,
    pub max_iter: usize,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self {
            f_tol: 1e-10,
            x_tol: 1e-12,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
}

/// Finds a root of `f` in `[a, b]` given `fa = f(a)` and `fb = f(b)` of
/// opposite sign (or one of them zero).
///
/// Evaluation errors from `f` are propagated untouched. The caller is
/// responsible for the bracket; an invalid one is a logic error and panics.
pub fn brent<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    mut fb: f64,
    opts: RootOptions,
) -> Result<Root, E> {
    assert!(
        fa.signum() != fb.signum() || fa == 0.0 || fb == 0.0,
        "brent: [{a}, {b}] does not bracket a root (f = {fa}, {fb})"
    );
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    // b is the best estimate, a the previous one, c the contrapoint
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for iteration in 0..opts.max_iter {
        if fb.abs() < opts.f_tol || fb == 0.0 {
            return Ok(Root { x: b, fx: fb, iterations: iteration });
        }
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * opts.x_tol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol {
            return Ok(Root { x: b, fx: fb, iterations: iteration });
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b)?;
    }
    Ok(Root {
        x: b,
        fx: fb,
        iterations: opts.max_iter,
    })
}
