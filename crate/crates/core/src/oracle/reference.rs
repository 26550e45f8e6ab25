//! Naive model evaluation, written straight from the cell equations with
//! nested vectors and no shared code with [`crate::model`].

use crate::error::{Error, Result};
use crate::grad::Objective;
use crate::model::TokenSeq;
use crate::oracle::dd::{Dd, Scalar};
use crate::params::{GradSet, GruParams, ParamSet};
use crate::train::{batch_loss_and_grad, TrainInstance};

type Grid<S> = Vec<Vec<Vec<S>>>;

/// Output of a reference evaluation.
#[derive(Debug, Clone)]
pub struct ReferencePass<S> {
    pub output: Vec<S>,
    /// `h_mn` of the forward scan.
    pub forward_final: Vec<S>,
    /// `h_mn` of the backward scan, when bidirectional.
    pub backward_final: Option<Vec<S>>,
    /// Whether each word-pair rectifier input was positive.
    pub relu_on: Vec<bool>,
}

fn lift<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::from_f64(x)).collect()
}

fn affine<S: Scalar>(w: &crate::linalg::Mat, x: &[S], b: &[f64]) -> Vec<S> {
    (0..w.rows())
        .map(|r| {
            let mut acc = S::from_f64(b[r]);
            for (c, &xc) in x.iter().enumerate() {
                acc = acc + S::from_f64(w.get(r, c)) * xc;
            }
            acc
        })
        .collect()
}

fn word_interactions<S: Scalar>(p: &ParamSet, s1: &TokenSeq, s2: &TokenSeq, relu_on: &mut Vec<bool>) -> Grid<S> {
    let de = p.config.embed_dim;
    let c = p.config.interaction_dim;
    let mut grid = Vec::new();
    for &wi in s1.ids() {
        let u: Vec<S> = lift(p.embed.row(wi));
        let mut row = Vec::new();
        for &vj in s2.ids() {
            let v: Vec<S> = lift(p.embed.row(vj));
            let mut cell = Vec::new();
            for k in 0..c {
                let mut z = S::from_f64(p.ntn_b.as_slice()[k]);
                for a in 0..de {
                    for b in 0..de {
                        z = z + u[a] * S::from_f64(p.ntn_t.get(k, a, b)) * v[b];
                    }
                }
                for a in 0..de {
                    z = z + S::from_f64(p.ntn_w.get(k, a)) * u[a];
                    z = z + S::from_f64(p.ntn_w.get(k, de + a)) * v[a];
                }
                let on = z > S::zero();
                relu_on.push(on);
                cell.push(if on { z } else { S::zero() });
            }
            row.push(cell);
        }
        grid.push(row);
    }
    grid
}

fn scan<S: Scalar>(g: &GruParams, grid: &Grid<S>) -> Vec<S> {
    let m = grid.len();
    let n = grid[0].len();
    let d = g.b.len();
    let mut h = vec![vec![vec![S::zero(); d]; n + 1]; m + 1];
    for i in 1..=m {
        for j in 1..=n {
            let s = &grid[i - 1][j - 1];
            let top = h[i - 1][j].clone();
            let left = h[i][j - 1].clone();
            let diag = h[i - 1][j - 1].clone();
            let q: Vec<S> = top.iter().chain(&left).chain(&diag).chain(s).copied().collect();

            let r: Vec<Vec<S>> = (0..3)
                .map(|k| affine(&g.wr[k], &q, g.br[k].as_slice()).into_iter().map(|x| x.sigmoid()).collect())
                .collect();
            let zp: Vec<Vec<S>> = (0..4).map(|k| affine(&g.wz[k], &q, g.bz[k].as_slice())).collect();

            let gated: Vec<S> = (0..d)
                .map(|k| r[0][k] * left[k])
                .chain((0..d).map(|k| r[1][k] * top[k]))
                .chain((0..d).map(|k| r[2][k] * diag[k]))
                .collect();
            let ws = affine(&g.w, s, g.b.as_slice());
            let ug = affine(&g.u, &gated, &vec![0.0; d]);

            for k in 0..d {
                let cand = (ws[k] + ug[k]).tanh();
                // softmax across the four gates at this dimension
                let mut mx = zp[0][k];
                for p in 1..4 {
                    if zp[p][k] > mx {
                        mx = zp[p][k];
                    }
                }
                let e: Vec<S> = (0..4).map(|p| (zp[p][k] - mx).exp()).collect();
                let tot = e[0] + e[1] + e[2] + e[3];
                let (zi, zl, zt, zd) = (e[0] / tot, e[1] / tot, e[2] / tot, e[3] / tot);
                h[i][j][k] = zl * left[k] + zt * top[k] + zd * diag[k] + zi * cand;
            }
        }
    }
    h[m][n].clone()
}

/// Evaluate the model on one pair in scalar type `S`.
pub fn reference_forward<S: Scalar>(p: &ParamSet, s1: &TokenSeq, s2: &TokenSeq) -> Result<ReferencePass<S>> {
    s1.check(p.config.vocab_size)?;
    s2.check(p.config.vocab_size)?;
    let mut relu_on = Vec::new();
    let grid = word_interactions::<S>(p, s1, s2, &mut relu_on);
    let forward_final = scan(&p.gru_fwd, &grid);
    let backward_final = p.gru_bwd.as_ref().map(|g| {
        let rev: Grid<S> = grid.iter().rev().map(|row| row.iter().rev().cloned().collect()).collect();
        scan(g, &rev)
    });
    let mut state = forward_final.clone();
    if let Some(b) = &backward_final {
        state.extend_from_slice(b);
    }
    let output = affine(&p.score_w, &state, p.score_b.as_slice());
    Ok(ReferencePass { output, forward_final, backward_final, relu_on })
}

/// Loss of one instance in scalar type `S`, plus the on/off pattern of its
/// non-smooth units.
pub fn reference_loss<S: Scalar>(p: &ParamSet, inst: &TrainInstance) -> Result<(S, Vec<bool>)> {
    match inst {
        TrainInstance::Regression { s1, s2, y } => {
            let pass = reference_forward::<S>(p, s1, s2)?;
            let r = S::from_f64(*y) - pass.output[0];
            Ok((r * r, pass.relu_on))
        }
        TrainInstance::Classification { s1, s2, label } => {
            let pass = reference_forward::<S>(p, s1, s2)?;
            if pass.output.len() != 2 {
                return Err(Error::Shape("classification needs a two-output scorer".into()));
            }
            let (a, b) = (pass.output[0], pass.output[1]);
            let mx = if a > b { a } else { b };
            let lse = mx + ((a - mx).exp() + (b - mx).exp()).ln();
            Ok((lse - pass.output[*label as usize], pass.relu_on))
        }
        TrainInstance::Ranking { s1, s2, s2_neg, .. } => {
            let pos = reference_forward::<S>(p, s1, s2)?;
            let neg = reference_forward::<S>(p, s1, s2_neg)?;
            let margin = S::one() - pos.output[0] + neg.output[0];
            let active = margin > S::zero();
            let mut kinks = pos.relu_on;
            kinks.extend(neg.relu_on);
            kinks.push(active);
            Ok((if active { margin } else { S::zero() }, kinks))
        }
    }
}

/// Mean batch loss evaluated in double-double by the reference model, with
/// analytic gradients from the production backward pass.
pub struct ReferenceObjective<'a> {
    pub instances: &'a [TrainInstance],
}

impl ReferenceObjective<'_> {
    fn eval(&self, params: &ParamSet) -> Result<(Dd, Vec<bool>)> {
        if self.instances.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut total = Dd::ZERO;
        let mut kinks = Vec::new();
        for inst in self.instances {
            let (l, k) = reference_loss::<Dd>(params, inst)?;
            total = total + l;
            kinks.extend(k);
        }
        Ok((total / Dd::from(self.instances.len() as f64), kinks))
    }
}

impl Objective for ReferenceObjective<'_> {
    fn loss(&self, params: &ParamSet) -> Result<Dd> {
        self.eval(params).map(|(l, _)| l)
    }

    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradSet)> {
        batch_loss_and_grad(params, self.instances)
    }

    fn kink_pattern(&self, params: &ParamSet) -> Result<Vec<bool>> {
        self.eval(params).map(|(_, k)| k)
    }

    fn loss_and_kinks(&self, params: &ParamSet) -> Result<(Dd, Vec<bool>)> {
        self.eval(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;
    use crate::params::ModelConfig;

    #[test]
    fn reference_agrees_with_production_forward() {
        for (seed, bi, n_out) in [(1u64, false, 1usize), (2, true, 1), (3, true, 2), (4, false, 2)] {
            let cfg = ModelConfig { vocab_size: 9, embed_dim: 4, interaction_dim: 3, hidden_dim: 4, n_out, bidirectional: bi };
            let p = ParamSet::random(cfg, 0.8, seed).unwrap();
            let a = TokenSeq(vec![0, 3, 8, 2, 2]);
            let b = TokenSeq(vec![7, 3, 1, 5]);
            let fast = forward(&a, &b, &p).unwrap();
            let slow = reference_forward::<f64>(&p, &a, &b).unwrap();
            let precise = reference_forward::<Dd>(&p, &a, &b).unwrap();
            for k in 0..n_out {
                assert!((fast.output.0[k] - slow.output[k]).abs() < 1e-12);
                assert!((fast.output.0[k] - precise.output[k].to_f64()).abs() < 1e-12);
            }
            assert_eq!(slow.relu_on, fast.interaction.pre.iter().map(|&x| x > 0.0).collect::<Vec<_>>());
        }
    }
}
