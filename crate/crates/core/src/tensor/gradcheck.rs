use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(params: &[(String, Tensor)], builder: &F, track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone().with_grad(track)))
        .collect();
    let loss = builder(&mut tape, &vars)?;
    let value = tape
        .value(loss)
        .item()
        .ok_or_else(|| Error::Contract("grad_check builder must return a scalar".into()))?;
    if !value.is_finite() {
        return Err(Error::DegenerateInput(format!("non-finite loss {value}")));
    }
    Ok((tape, vars, loss))
}

/// Compares reverse-mode gradients of `builder` against central finite
/// differences, entry by entry, for every named parameter.
pub fn grad_check<F>(params: &[(String, Tensor)], builder: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = eval(params, &builder, true)?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, (_, t))| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(tape);

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (p, grads) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut sum_rel = 0.0;
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[p].1.data()[i];
            work[p].1.data_mut()[i] = orig + FD_STEP;
            let plus = scalar_loss(&work, &builder)?;
            work[p].1.data_mut()[i] = orig - FD_STEP;
            let minus = scalar_loss(&work, &builder)?;
            work[p].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let r = rel_error(a, numeric);
            max_rel = max_rel.max(r);
            sum_rel += r;
        }
        out.push(ParamCheck {
            name: params[p].0.clone(),
            max_rel_error: max_rel,
            mean_rel_error: sum_rel / grads.len() as f64,
        });
    }
    Ok(GradCheckReport {
        loss: loss_value,
        params: out,
    })
}

fn scalar_loss<F>(params: &[(String, Tensor)], builder: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = eval(params, builder, false)?;
    Ok(tape.value(loss).data()[0])
}
