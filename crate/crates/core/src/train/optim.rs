use serde::{Deserialize, Serialize};

use crate::corelin::DenseMatrix;
use crate::error::{Error, Result};
use crate::model::{GradientSet, ModelParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<DenseMatrix> = params
            .tables()
            .iter()
            .map(|t| DenseMatrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        for ((m, v), p) in self.m.iter().zip(&self.v).zip(params.tables()) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: m.shape(),
                });
            }
        }
        if self.m.len() != params.tables().len() || self.v.len() != self.m.len() {
            return Err(Error::Config(
                "optimizer state does not match the parameter layout".into(),
            ));
        }
        Ok(())
    }
}

fn check_grads(params: &ModelParams, grads: &GradientSet) -> Result<()> {
    if grads.tables.len() != params.tables().len() {
        return Err(Error::Config(
            "gradient set does not match the parameter layout".into(),
        ));
    }
    for (g, p) in grads.tables.iter().zip(params.tables()) {
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "optimizer step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    check_grads(params, grads)?;
    state.check(params)?;
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (i, table) in params.tables_mut().iter_mut().enumerate() {
        let g = grads.tables[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, p) in table.as_mut_slice().iter_mut().enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut ModelParams, grads: &GradientSet, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (t, g) in params.tables_mut().iter_mut().zip(&grads.tables) {
        t.axpy(-lr, g)?;
    }
    Ok(())
}
