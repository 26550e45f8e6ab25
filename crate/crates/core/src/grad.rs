//! Reverse-mode gradients of the full pipeline and a central-difference
//! checker for them.
//!
//! The backward pass walks the lattice from `(m, n)` back to `(1, 1)`. By the
//! time a cell is visited, every successor that consumed its state has
//! already pushed its contribution, so the cell's adjoint is complete.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Vector;
use crate::model::{Direction, ForwardPass, InteractionTensor, LatticeState, TokenSeq};
use crate::oracle::dd::Dd;
use crate::params::{GradSet, GruParams, ParamSet};

/// Gradient of `upstream · output` with respect to every parameter, given
/// the forward pass that produced `output`.
pub fn backward(
    s1: &TokenSeq,
    s2: &TokenSeq,
    params: &ParamSet,
    pass: &ForwardPass,
    upstream: &Vector,
) -> Result<GradSet> {
    let mut grads = params.zeros_like();
    backward_into(s1, s2, params, pass, upstream, &mut grads)?;
    Ok(grads)
}

/// Same as [`backward`] but accumulates into an existing gradient set.
pub fn backward_into(
    s1: &TokenSeq,
    s2: &TokenSeq,
    params: &ParamSet,
    pass: &ForwardPass,
    upstream: &Vector,
    grads: &mut GradSet,
) -> Result<()> {
    let cfg = params.config;
    if upstream.len() != cfg.n_out {
        return shape_err(format!("upstream has {} entries, scorer has {}", upstream.len(), cfg.n_out));
    }
    if !grads.same_layout(params) {
        return shape_err("gradient set does not match parameters");
    }
    if s1.len() != pass.interaction.m || s2.len() != pass.interaction.n {
        return Err(Error::Internal("forward pass does not belong to these sequences".into()));
    }
    let d = cfg.hidden_dim;
    let up = upstream.as_slice();

    // scorer
    grads.score_w.add_outer(up, &pass.final_state);
    crate::linalg::axpy(1.0, up, grads.score_b.as_mut_slice());
    let mut d_final = vec![0.0; cfg.score_width()];
    params.score_w.matvec_t_acc(up, &mut d_final);

    let (m, n, c) = (pass.interaction.m, pass.interaction.n, pass.interaction.c);
    let mut ds = vec![0.0; m * n * c];

    lattice_backward(&pass.fwd, &params.gru_fwd, &mut grads.gru_fwd, &d_final[..d], &mut ds)?;
    if let Some(bwd) = &pass.bwd {
        let (gp, gg) = match (&params.gru_bwd, grads.gru_bwd.as_mut()) {
            (Some(p), Some(g)) => (p, g),
            _ => return Err(Error::Internal("bidirectional pass without backward parameters".into())),
        };
        lattice_backward(bwd, gp, gg, &d_final[d..], &mut ds)?;
    }

    interaction_backward(s1, s2, params, &pass.interaction, &ds, grads)
}

/// Back-propagate `d_final` (adjoint of `h_mn`) through one lattice scan.
/// Interaction adjoints are accumulated into `ds` in original (unreversed)
/// grid coordinates.
fn lattice_backward(
    st: &LatticeState,
    gru: &GruParams,
    g: &mut GruParams,
    d_final: &[f64],
    ds: &mut [f64],
) -> Result<()> {
    if !st.has_cache() {
        return Err(Error::Internal("lattice was produced without a backward cache".into()));
    }
    let (m, n, d) = (st.m, st.n, st.d);
    let c = gru.w.cols();
    let qd = 3 * d + c;
    let stride = n + 1;
    // adjoints of every lattice state, boundary included
    let mut dh = vec![0.0; (m + 1) * (n + 1) * d];
    let o = (m * stride + n) * d;
    dh[o..o + d].copy_from_slice(d_final);

    let mut dz = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut dzp = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut dq = vec![0.0; qd];
    let mut da = vec![0.0; d];
    let mut hh = vec![0.0; 3 * d];
    let mut rh = vec![0.0; 3 * d];
    let mut drh = vec![0.0; 3 * d];
    let mut dpre = vec![0.0; d];

    for i in (1..=m).rev() {
        for j in (1..=n).rev() {
            let here = (i * stride + j) * d;
            let dcur: Vec<f64> = dh[here..here + d].to_vec();
            if dcur.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericCell { i, j, what: "non-finite adjoint".into() });
            }
            if dcur.iter().all(|&x| x == 0.0) {
                continue;
            }
            let q = st.q(i, j).ok_or_else(|| Error::Internal("missing gate input cache".into()))?;
            let cand = st.cand(i, j).ok_or_else(|| Error::Internal("missing candidate cache".into()))?;
            let z = st.z(i, j);
            let r = st.r(i, j);
            let (hl, ht, hd) = (st.h(i, j - 1), st.h(i - 1, j), st.h(i - 1, j - 1));

            let left = (i * stride + j - 1) * d;
            let top = ((i - 1) * stride + j) * d;
            let diag = ((i - 1) * stride + j - 1) * d;

            // h = z_l h_left + z_t h_top + z_d h_diag + z_i h'
            for k in 0..d {
                let a = dcur[k];
                dz[0][k] = a * cand[k];
                dz[1][k] = a * hl[k];
                dz[2][k] = a * ht[k];
                dz[3][k] = a * hd[k];
                dh[left + k] += a * z[1][k];
                dh[top + k] += a * z[2][k];
                dh[diag + k] += a * z[3][k];
                // through h' = tanh(.)
                da[k] = a * z[0][k] * (1.0 - cand[k] * cand[k]);
            }

            // softmax over the four gates, per dimension
            for k in 0..d {
                let dot: f64 = (0..4).map(|p| z[p][k] * dz[p][k]).sum();
                for p in 0..4 {
                    dzp[p][k] = z[p][k] * (dz[p][k] - dot);
                }
            }

            dq.iter_mut().for_each(|x| *x = 0.0);

            // candidate pre-activation: W s + U (r ⊙ hh) + b
            hh[..d].copy_from_slice(hl);
            hh[d..2 * d].copy_from_slice(ht);
            hh[2 * d..].copy_from_slice(hd);
            for p in 0..3 {
                for k in 0..d {
                    rh[p * d + k] = r[p][k] * hh[p * d + k];
                }
            }
            let sij = &q[3 * d..];
            g.w.add_outer(&da, sij);
            gru.w.matvec_t_acc(&da, &mut dq[3 * d..]);
            crate::linalg::axpy(1.0, &da, g.b.as_mut_slice());
            g.u.add_outer(&da, &rh);
            drh.iter_mut().for_each(|x| *x = 0.0);
            gru.u.matvec_t_acc(&da, &mut drh);
            for k in 0..d {
                dh[left + k] += drh[k] * r[0][k];
                dh[top + k] += drh[d + k] * r[1][k];
                dh[diag + k] += drh[2 * d + k] * r[2][k];
            }

            // reset gates: r = sigmoid(Wr q + br)
            for p in 0..3 {
                for k in 0..d {
                    let rv = r[p][k];
                    dpre[k] = drh[p * d + k] * hh[p * d + k] * rv * (1.0 - rv);
                }
                g.wr[p].add_outer(&dpre, q);
                crate::linalg::axpy(1.0, &dpre, g.br[p].as_mut_slice());
                gru.wr[p].matvec_t_acc(&dpre, &mut dq);
            }

            // update gate pre-activations
            for p in 0..4 {
                g.wz[p].add_outer(&dzp[p], q);
                crate::linalg::axpy(1.0, &dzp[p], g.bz[p].as_mut_slice());
                gru.wz[p].matvec_t_acc(&dzp[p], &mut dq);
            }

            // q = [h_top, h_left, h_diag, s]
            for k in 0..d {
                dh[top + k] += dq[k];
                dh[left + k] += dq[d + k];
                dh[diag + k] += dq[2 * d + k];
            }
            let (si, sj) = match st.direction {
                Direction::Forward => (i - 1, j - 1),
                Direction::Backward => (m - i, n - j),
            };
            let so = (si * n + sj) * c;
            crate::linalg::axpy(1.0, &dq[3 * d..], &mut ds[so..so + c]);
        }
    }
    Ok(())
}

fn interaction_backward(
    s1: &TokenSeq,
    s2: &TokenSeq,
    params: &ParamSet,
    inter: &InteractionTensor,
    ds: &[f64],
    grads: &mut GradSet,
) -> Result<()> {
    let de = params.config.embed_dim;
    let (m, n, c) = (inter.m, inter.n, inter.c);
    if inter.pre.len() != m * n * c {
        return Err(Error::Internal("interaction tensor lacks pre-activations".into()));
    }
    // relu'(0) = 0
    let dpre: Vec<f64> = inter.pre.iter().zip(ds).map(|(&z, &g)| if z > 0.0 { g } else { 0.0 }).collect();
    let mut dv = vec![0.0; n * de];
    let mut w = vec![0.0; de];
    let mut p = vec![0.0; de];
    let mut du = vec![0.0; de];
    let mut uv = vec![0.0; 2 * de];
    for i in 0..m {
        let u = params.embed.row(s1.0[i]);
        du.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..c {
            let t = params.ntn_t.slice(k);
            // w = Σ_j g_ijk v_j gives dT^k += u wᵀ and du += T^k w
            w.iter_mut().for_each(|x| *x = 0.0);
            let mut any = false;
            for j in 0..n {
                let a = dpre[(i * n + j) * c + k];
                if a != 0.0 {
                    any = true;
                    crate::linalg::axpy(a, params.embed.row(s2.0[j]), &mut w);
                }
            }
            if !any {
                continue;
            }
            let gt = grads.ntn_t.slice_mut(k);
            for r in 0..de {
                let trow = &t[r * de..(r + 1) * de];
                du[r] += crate::linalg::dot(trow, &w);
                if u[r] != 0.0 {
                    crate::linalg::axpy(u[r], &w, &mut gt[r * de..(r + 1) * de]);
                }
            }
            // dv_j += g_ijk uᵀ T^k
            crate::model::left_slice_product(t, u, &mut p);
            for j in 0..n {
                let a = dpre[(i * n + j) * c + k];
                if a != 0.0 {
                    crate::linalg::axpy(a, &p, &mut dv[j * de..(j + 1) * de]);
                }
            }
        }
        for j in 0..n {
            let g = &dpre[(i * n + j) * c..(i * n + j + 1) * c];
            if g.iter().all(|&a| a == 0.0) {
                continue;
            }
            uv[..de].copy_from_slice(u);
            uv[de..].copy_from_slice(params.embed.row(s2.0[j]));
            grads.ntn_w.add_outer(g, &uv);
            crate::linalg::axpy(1.0, g, grads.ntn_b.as_mut_slice());
            for (k, &a) in g.iter().enumerate() {
                if a != 0.0 {
                    let wrow = params.ntn_w.row(k);
                    crate::linalg::axpy(a, &wrow[..de], &mut du);
                    crate::linalg::axpy(a, &wrow[de..], &mut dv[j * de..(j + 1) * de]);
                }
            }
        }
        crate::linalg::axpy(1.0, &du, grads.embed.row_mut(s1.0[i]));
    }
    for j in 0..n {
        crate::linalg::axpy(1.0, &dv[j * de..(j + 1) * de], grads.embed.row_mut(s2.0[j]));
    }
    Ok(())
}

/// A scalar function of the parameters with an analytic gradient, as seen
/// by [`fd_check`].
pub trait Objective {
    /// Loss value. Objectives evaluated in plain `f64` return `Dd::from(x)`;
    /// extended-precision objectives keep the low word so that
    /// `L(θ+ε) − L(θ−ε)` does not drown in rounding noise.
    fn loss(&self, params: &ParamSet) -> Result<Dd>;

    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradSet)>;

    /// On/off pattern of every non-smooth unit (rectifiers, hinge). A
    /// perturbation that changes the pattern straddles a kink, and the
    /// corresponding entry is flagged instead of judged.
    fn kink_pattern(&self, _params: &ParamSet) -> Result<Vec<bool>> {
        Ok(Vec::new())
    }

    /// `loss` and `kink_pattern` together, for objectives that get both
    /// from one evaluation.
    fn loss_and_kinks(&self, params: &ParamSet) -> Result<(Dd, Vec<bool>)> {
        Ok((self.loss(params)?, self.kink_pattern(params)?))
    }
}

/// One checked entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub flagged: bool,
}

/// Check result for one named array.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayCheck {
    pub name: String,
    pub entries: Vec<EntryCheck>,
}

impl ArrayCheck {
    pub fn checked(&self) -> usize {
        self.entries.len()
    }

    pub fn flagged(&self) -> usize {
        self.entries.iter().filter(|e| e.flagged).count()
    }

    /// Largest relative error among unflagged entries.
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().filter(|e| !e.flagged).map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub eps: f64,
    pub arrays: Vec<ArrayCheck>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.arrays.iter().map(|a| a.max_rel_error()).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }

    /// Fold another report (same array names) into this one.
    pub fn merge(&mut self, other: FdReport) {
        for arr in other.arrays {
            match self.arrays.iter_mut().find(|a| a.name == arr.name) {
                Some(a) => a.entries.extend(arr.entries),
                None => self.arrays.push(arr),
            }
        }
    }

    /// Plain-text table: array name, entries checked, flagged, max relative error.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8} {:>8} {:>14}", "array", "checked", "flagged", "max_rel_err");
        for a in &self.arrays {
            let _ = writeln!(s, "{:<16} {:>8} {:>8} {:>14.3e}", a.name, a.checked(), a.flagged(), a.max_rel_error());
        }
        s
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients with central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε`.
///
/// The divisor is the exact distance between the two perturbed values as
/// stored, which differs from `2ε` by rounding of `θ ± ε`.
///
/// Arrays with at most `max_per_array` entries are checked exhaustively;
/// larger ones on an evenly strided sample.
pub fn fd_check<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamSet,
    eps: f64,
    max_per_array: usize,
) -> Result<FdReport> {
    if !(eps > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {eps}")));
    }
    let (_, analytic) = objective.loss_and_grad(params)?;
    let base_kinks = objective.kink_pattern(params)?;
    let mut work = params.clone();
    let infos = params.array_infos();
    let mut arrays = Vec::with_capacity(infos.len());
    for (a, info) in infos.iter().enumerate() {
        let len = info.shape.iter().product::<usize>();
        let grad = analytic.arrays()[a].1.to_vec();
        let mut entries = Vec::new();
        for idx in sample_indices(len, max_per_array) {
            let orig = work.arrays_mut()[a][idx];
            let (up, down) = (orig + eps, orig - eps);
            work.arrays_mut()[a][idx] = up;
            let (plus, kinks_plus) = objective.loss_and_kinks(&work)?;
            work.arrays_mut()[a][idx] = down;
            let (minus, kinks_minus) = objective.loss_and_kinks(&work)?;
            work.arrays_mut()[a][idx] = orig;

            let numeric = ((plus - minus) / (Dd::from(up) - Dd::from(down))).to_f64();
            let flagged = kinks_plus != base_kinks || kinks_minus != base_kinks;
            entries.push(EntryCheck {
                index: idx,
                analytic: grad[idx],
                numeric,
                rel_error: relative_error(grad[idx], numeric),
                flagged,
            });
        }
        arrays.push(ArrayCheck { name: info.name.clone(), entries });
    }
    Ok(FdReport { eps, arrays })
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max || max == 0 {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..max).map(|k| k * len / max).collect();
    out.dedup();
    out
}
