use super::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of `f` against central differences for every
/// entry of every parameter in `store`.
///
/// `f` must build the same scalar loss deterministically on each call.
pub fn grad_check<F>(store: &ParameterStore, f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::Invalid(format!("finite-difference step {step} outside (0, 1e-3]")));
    }
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(s, &mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    tape.backward(loss)?;
    let mut work = store.clone();
    work.zero_grad();
    work.accumulate_grads(&tape)?;

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let analytic = work
            .get(&name)
            .and_then(|t| t.grad())
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("analytic gradient of `{name}`")));
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.get(&name).unwrap().values()[i];
            work.get_mut(&name).unwrap().values_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().values_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("numeric gradient of `{name}`[{i}]")));
            }
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        params.push(ParamCheck {
            entries: analytic.len(),
            passed: max_rel < tolerance,
            name,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { tolerance, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fault, Tensor};

    #[test]
    fn identity_sum_is_exact() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::new(vec![3], vec![0.1, -2.0, 5.0]).unwrap());
        let r = grad_check(
            &s,
            |s, t| {
                let x = s.bind(t, "x")?;
                Ok(t.sum(x))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error() < 1e-9);
    }

    #[test]
    fn wrong_rule_is_caught() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7]).unwrap());
        s.insert("g", Tensor::new(vec![3], vec![1.0, 0.5, -2.0]).unwrap());
        s.insert("b", Tensor::new(vec![3], vec![0.0, 0.1, 0.2]).unwrap());
        s.insert("w", Tensor::new(vec![3, 1], vec![0.4, -0.3, 0.9]).unwrap());
        let build = |s: &ParameterStore, t: &mut Tape| {
            t.inject_fault(Fault::NegateLayerNormGrad);
            let x = s.bind(t, "x")?;
            let g = s.bind(t, "g")?;
            let b = s.bind(t, "b")?;
            let w = s.bind(t, "w")?;
            let y = t.layer_norm(x, g, b, 1e-5)?;
            let z = t.matmul(y, w)?;
            let z = t.sigmoid(z);
            Ok(t.sum(z))
        };
        let r = grad_check(&s, build, 1e-5, 1e-4).unwrap();
        let x = r.params.iter().find(|p| p.name == "x").unwrap();
        assert!(x.max_rel_error > 1e-2);
        assert!(!r.passed());
        // gamma and beta rules are untouched
        assert!(r.params.iter().find(|p| p.name == "g").unwrap().passed);
    }

    #[test]
    fn step_must_be_small() {
        let s = ParameterStore::new();
        let r = grad_check(&s, |_, t| t.constant(vec![1], vec![0.0]), 1e-2, 1e-4);
        assert!(r.is_err());
    }
}
