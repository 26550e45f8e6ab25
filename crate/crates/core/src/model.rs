//! Forward evaluation: embeddings, word-pair interactions, the spatial GRU
//! lattice and the linear scorer. Also the exact-match lattice used as the
//! LCS reference.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{sigmoid_scalar, softmax4, Vector};
use crate::params::{GruParams, ParamSet};

/// A text as vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSeq(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn reversed(&self) -> TokenSeq {
        TokenSeq(self.0.iter().rev().copied().collect())
    }

    /// Fails if the sequence is empty or any id is `>= vocab_size`.
    pub fn check(&self, vocab_size: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&bad) = self.0.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of size {vocab_size}")));
        }
        Ok(())
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(v: Vec<usize>) -> Self {
        TokenSeq(v)
    }
}

/// Scan order of a lattice pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Top-left to bottom-right.
    Forward,
    /// Bottom-right to top-left: the interaction grid is reversed on both
    /// axes and then scanned like the forward pass.
    Backward,
}

/// Row lookup of every id in the embedding matrix.
pub fn embed(seq: &TokenSeq, params: &ParamSet) -> Result<Vec<Vector>> {
    if let Some(&bad) = seq.0.iter().find(|&&id| id >= params.embed.rows()) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of size {}", params.embed.rows())));
    }
    Ok(seq.0.iter().map(|&id| Vector::from_slice(params.embed.row(id))).collect())
}

/// `m × n` grid of `c`-dimensional word-pair interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTensor {
    pub m: usize,
    pub n: usize,
    pub c: usize,
    /// Post-rectifier values, `[i][j][k]` flattened (0-based `i`, `j`).
    pub values: Vec<f64>,
    /// Pre-rectifier values, same layout. Empty when not tracked.
    pub pre: Vec<f64>,
}

impl InteractionTensor {
    pub fn new(m: usize, n: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != m * n * c {
            return shape_err(format!("interaction grid {m}x{n}x{c} needs {} values", m * n * c));
        }
        Ok(InteractionTensor { m, n, c, values, pre: Vec::new() })
    }

    /// Interaction of word `i` and word `j`, 0-based.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.n + j) * self.c;
        &self.values[o..o + self.c]
    }

    /// The grid flipped along both axes.
    pub fn reversed(&self) -> InteractionTensor {
        let flip = |src: &[f64]| {
            if src.is_empty() {
                return Vec::new();
            }
            let mut out = Vec::with_capacity(src.len());
            for i in (0..self.m).rev() {
                for j in (0..self.n).rev() {
                    let o = (i * self.n + j) * self.c;
                    out.extend_from_slice(&src[o..o + self.c]);
                }
            }
            out
        };
        InteractionTensor { m: self.m, n: self.n, c: self.c, values: flip(&self.values), pre: flip(&self.pre) }
    }

    /// Grid of one interaction channel, `m × n`, row-major.
    pub fn channel(&self, k: usize) -> Vec<Vec<f64>> {
        (0..self.m).map(|i| (0..self.n).map(|j| self.at(i, j)[k]).collect()).collect()
    }
}

/// `s_ij = relu(u_iᵀ T u_j + W [u_i; v_j] + b)` for every word pair.
pub fn interaction_tensor(s1: &TokenSeq, s2: &TokenSeq, params: &ParamSet) -> Result<InteractionTensor> {
    let vocab = params.config.vocab_size;
    s1.check(vocab)?;
    s2.check(vocab)?;
    let de = params.config.embed_dim;
    let c = params.config.interaction_dim;
    let (m, n) = (s1.len(), s2.len());

    // The linear part splits into a left half (acting on u_i) and a right
    // half (acting on v_j); precompute both per word.
    let left: Vec<Vec<f64>> = s1
        .ids()
        .iter()
        .map(|&id| half_linear(params, params.embed.row(id), 0))
        .collect();
    let right: Vec<Vec<f64>> = s2
        .ids()
        .iter()
        .map(|&id| half_linear(params, params.embed.row(id), de))
        .collect();

    // u_iᵀ T^k v_j = (u_iᵀ T^k) · v_j: form the row vector once per (i, k)
    let mut pre = vec![0.0; m * n * c];
    let mut p = vec![0.0; de];
    for i in 0..m {
        let u = params.embed.row(s1.0[i]);
        for k in 0..c {
            left_slice_product(params.ntn_t.slice(k), u, &mut p);
            let base = left[i][k] + params.ntn_b.as_slice()[k];
            for j in 0..n {
                let v = params.embed.row(s2.0[j]);
                pre[(i * n + j) * c + k] = base + crate::linalg::dot(&p, v) + right[j][k];
            }
        }
    }
    if let Some(pos) = pre.iter().position(|x| !x.is_finite()) {
        let cell = pos / c;
        return Err(Error::NumericCell { i: cell / n + 1, j: cell % n + 1, what: "non-finite interaction".into() });
    }
    let values = pre.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Ok(InteractionTensor { m, n, c, values, pre })
}

/// `out = uᵀ T` for one `de × de` slice `T`.
pub(crate) fn left_slice_product(t: &[f64], u: &[f64], out: &mut [f64]) {
    let de = u.len();
    out.iter_mut().for_each(|x| *x = 0.0);
    for (r, &ur) in u.iter().enumerate() {
        if ur != 0.0 {
            crate::linalg::axpy(ur, &t[r * de..(r + 1) * de], out);
        }
    }
}

fn half_linear(params: &ParamSet, u: &[f64], offset: usize) -> Vec<f64> {
    let de = params.config.embed_dim;
    (0..params.ntn_w.rows())
        .map(|k| crate::linalg::dot(&params.ntn_w.row(k)[offset..offset + de], u))
        .collect()
}

/// Gate values at one lattice cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub z_i: Vec<f64>,
    pub z_l: Vec<f64>,
    pub z_t: Vec<f64>,
    pub z_d: Vec<f64>,
    pub r_l: Vec<f64>,
    pub r_t: Vec<f64>,
    pub r_d: Vec<f64>,
}

/// Hidden states of a full lattice scan, with gate values for every cell
/// and (for trained-model scans) the intermediates needed by the backward
/// pass.
///
/// Indices are 1-based for cells; row 0 and column 0 are the zero boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeState {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub direction: Direction,
    /// `(m+1) × (n+1) × d`
    h: Vec<f64>,
    /// `m × n × 4 × d`, gate order (i, l, t, d)
    z: Vec<f64>,
    /// `m × n × 3 × d`, gate order (l, t, d)
    r: Vec<f64>,
    cache: Option<LatticeCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct LatticeCache {
    /// Gate inputs `q`, `m × n × (3d + c)`.
    q: Vec<f64>,
    /// Candidate states `h'`, `m × n × d`.
    cand: Vec<f64>,
}

impl LatticeState {
    fn cell(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= 1 && j >= 1);
        (i - 1) * self.n + (j - 1)
    }

    /// Hidden state at lattice position `(i, j)`, `0 <= i <= m`, `0 <= j <= n`.
    #[inline]
    pub fn h(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * (self.n + 1) + j) * self.d;
        &self.h[o..o + self.d]
    }

    fn h_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * (self.n + 1) + j) * self.d;
        &mut self.h[o..o + self.d]
    }

    /// Final state `h_mn`.
    pub fn final_state(&self) -> &[f64] {
        self.h(self.m, self.n)
    }

    /// Update gates at cell `(i, j)` in the order (i, l, t, d).
    pub fn z(&self, i: usize, j: usize) -> [&[f64]; 4] {
        let o = self.cell(i, j) * 4 * self.d;
        let d = self.d;
        std::array::from_fn(|p| &self.z[o + p * d..o + (p + 1) * d])
    }

    /// Reset gates at cell `(i, j)` in the order (l, t, d).
    pub fn r(&self, i: usize, j: usize) -> [&[f64]; 3] {
        let o = self.cell(i, j) * 3 * self.d;
        let d = self.d;
        std::array::from_fn(|p| &self.r[o + p * d..o + (p + 1) * d])
    }

    pub fn gate(&self, i: usize, j: usize) -> GateRecord {
        let [zi, zl, zt, zd] = self.z(i, j);
        let [rl, rt, rd] = self.r(i, j);
        GateRecord {
            z_i: zi.to_vec(),
            z_l: zl.to_vec(),
            z_t: zt.to_vec(),
            z_d: zd.to_vec(),
            r_l: rl.to_vec(),
            r_t: rt.to_vec(),
            r_d: rd.to_vec(),
        }
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub(crate) fn q(&self, i: usize, j: usize) -> Option<&[f64]> {
        let cache = self.cache.as_ref()?;
        let w = cache.q.len() / (self.m * self.n);
        let o = self.cell(i, j) * w;
        Some(&cache.q[o..o + w])
    }

    pub(crate) fn cand(&self, i: usize, j: usize) -> Option<&[f64]> {
        let cache = self.cache.as_ref()?;
        let o = self.cell(i, j) * self.d;
        Some(&cache.cand[o..o + self.d])
    }

    /// One hidden dimension of the whole lattice, `(m+1) × (n+1)`.
    pub fn h_grid(&self, dim: usize) -> Vec<Vec<f64>> {
        (0..=self.m).map(|i| (0..=self.n).map(|j| self.h(i, j)[dim]).collect()).collect()
    }

    /// One hidden dimension over the interior cells only, `m × n`.
    pub fn h_interior(&self, dim: usize) -> Vec<Vec<f64>> {
        (1..=self.m).map(|i| (1..=self.n).map(|j| self.h(i, j)[dim]).collect()).collect()
    }

    /// A forward lattice with zero hidden states and the given update gates
    /// per cell (row-major, each `[z_i, z_l, z_t, z_d]` with one entry per
    /// dimension repeated across all `d` dimensions). Reset gates are 1.
    pub fn with_gates(m: usize, n: usize, d: usize, gates: &[[f64; 4]]) -> Self {
        assert_eq!(gates.len(), m * n, "one gate record per cell");
        let mut st = Self::empty(m, n, d, Direction::Forward);
        st.r.iter_mut().for_each(|v| *v = 1.0);
        for (cell, g) in gates.iter().enumerate() {
            for (p, &v) in g.iter().enumerate() {
                let o = (cell * 4 + p) * d;
                st.z[o..o + d].iter_mut().for_each(|x| *x = v);
            }
        }
        st
    }

    fn empty(m: usize, n: usize, d: usize, direction: Direction) -> Self {
        LatticeState {
            m,
            n,
            d,
            direction,
            h: vec![0.0; (m + 1) * (n + 1) * d],
            z: vec![0.0; m * n * 4 * d],
            r: vec![0.0; m * n * 3 * d],
            cache: None,
        }
    }
}

/// Run the spatial GRU over an interaction grid.
///
/// For [`Direction::Backward`] the grid is reversed before the scan, so
/// cell `(i, j)` of the returned lattice corresponds to word pair
/// `(m+1-i, n+1-j)`.
pub fn spatial_gru_forward(s: &InteractionTensor, gru: &GruParams, direction: Direction) -> Result<LatticeState> {
    let c = s.c;
    let d = gru.b.len();
    if gru.w.cols() != c || gru.u.cols() != 3 * d || gru.wr[0].cols() != 3 * d + c {
        return shape_err(format!("spatial GRU with d={d} cannot consume interactions of width {c}"));
    }
    let reversed;
    let grid = match direction {
        Direction::Forward => s,
        Direction::Backward => {
            reversed = s.reversed();
            &reversed
        }
    };
    let (m, n) = (grid.m, grid.n);
    let qd = 3 * d + c;
    let mut st = LatticeState::empty(m, n, d, direction);
    let mut qs = vec![0.0; m * n * qd];
    let mut cands = vec![0.0; m * n * d];

    let mut zpre = vec![0.0; 4 * d];
    let mut z = vec![0.0; 4 * d];
    let mut r = vec![0.0; 3 * d];
    let mut hh = vec![0.0; 3 * d];
    let mut acc = vec![0.0; d];
    let mut out = vec![0.0; d];
    for i in 1..=m {
        for j in 1..=n {
            let cell = (i - 1) * n + (j - 1);
            let sij = grid.at(i - 1, j - 1);
            let q = &mut qs[cell * qd..(cell + 1) * qd];
            q[..d].copy_from_slice(st.h(i - 1, j));
            q[d..2 * d].copy_from_slice(st.h(i, j - 1));
            q[2 * d..3 * d].copy_from_slice(st.h(i - 1, j - 1));
            q[3 * d..].copy_from_slice(sij);
            let q = &*q;

            // reset gates
            for g in 0..3 {
                let rg = &mut r[g * d..(g + 1) * d];
                rg.copy_from_slice(gru.br[g].as_slice());
                gru.wr[g].matvec_acc(q, rg);
                rg.iter_mut().for_each(|x| *x = sigmoid_scalar(*x));
            }

            // update gates
            for g in 0..4 {
                let zp = &mut zpre[g * d..(g + 1) * d];
                zp.copy_from_slice(gru.bz[g].as_slice());
                gru.wz[g].matvec_acc(q, zp);
            }
            for k in 0..d {
                let sm = softmax4([zpre[k], zpre[d + k], zpre[2 * d + k], zpre[3 * d + k]]);
                for g in 0..4 {
                    z[g * d + k] = sm[g];
                }
            }

            // candidate: r pairs with (h_left, h_top, h_diag)
            let (hl, ht, hd) = (st.h(i, j - 1), st.h(i - 1, j), st.h(i - 1, j - 1));
            hh[..d].copy_from_slice(hl);
            hh[d..2 * d].copy_from_slice(ht);
            hh[2 * d..].copy_from_slice(hd);
            for (x, rv) in hh.iter_mut().zip(&r) {
                *x *= rv;
            }
            acc.copy_from_slice(gru.b.as_slice());
            gru.w.matvec_acc(sij, &mut acc);
            gru.u.matvec_acc(&hh, &mut acc);
            let cand = &mut cands[cell * d..(cell + 1) * d];
            for k in 0..d {
                cand[k] = acc[k].tanh();
                out[k] = z[d + k] * hl[k] + z[2 * d + k] * ht[k] + z[3 * d + k] * hd[k] + z[k] * cand[k];
            }
            if out.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericCell { i, j, what: "non-finite hidden state".into() });
            }
            st.h_mut(i, j).copy_from_slice(&out);
            st.z[cell * 4 * d..(cell + 1) * 4 * d].copy_from_slice(&z);
            st.r[cell * 3 * d..(cell + 1) * 3 * d].copy_from_slice(&r);
        }
    }
    st.cache = Some(LatticeCache { q: qs, cand: cands });
    Ok(st)
}

/// Linear scorer applied to a final state (concatenated over directions).
pub fn score(final_state: &[f64], params: &ParamSet) -> Result<Vector> {
    let mut out = params.score_w.matvec(final_state)?;
    for (o, b) in out.0.iter_mut().zip(params.score_b.as_slice()) {
        *o += b;
    }
    Ok(out)
}

/// Everything computed by one forward evaluation of a pair.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub interaction: InteractionTensor,
    pub fwd: LatticeState,
    pub bwd: Option<LatticeState>,
    /// Input of the scorer: `h_mn`, or `[h_mn^fwd; h_mn^bwd]`.
    pub final_state: Vec<f64>,
    pub output: Vector,
}

/// Full pipeline with all intermediates retained.
pub fn forward(s1: &TokenSeq, s2: &TokenSeq, params: &ParamSet) -> Result<ForwardPass> {
    let interaction = interaction_tensor(s1, s2, params)?;
    let fwd = spatial_gru_forward(&interaction, &params.gru_fwd, Direction::Forward)?;
    let bwd = match &params.gru_bwd {
        Some(g) => Some(spatial_gru_forward(&interaction, g, Direction::Backward)?),
        None => None,
    };
    let mut final_state = fwd.final_state().to_vec();
    if let Some(b) = &bwd {
        final_state.extend_from_slice(b.final_state());
    }
    let output = score(&final_state, params)?;
    Ok(ForwardPass { interaction, fwd, bwd, final_state, output })
}

/// Matching score of a pair: `n_out` values.
pub fn match_score(s1: &TokenSeq, s2: &TokenSeq, params: &ParamSet) -> Result<Vector> {
    forward(s1, s2, params).map(|p| p.output)
}

/// Exact-match lattice with hard gate selection.
///
/// Uses a 1-dimensional state, the indicator `s_ij = [x_i == y_j]` as the
/// interaction, the candidate `h' = h_diag + s_ij`, and replaces the soft
/// gate mixture with a max over `(h_left, h_top, h_diag + s_ij)`. The winning
/// branch is recorded as a one-hot gate: `z_d = z_i = 1/2` for the diagonal
/// branch (both gates feed it), otherwise `z_t = 1` or `z_l = 1`. The
/// diagonal wins whenever the symbols match; otherwise top wins ties with
/// left. Reset gates are disabled and recorded as 1.
pub fn exact_lcs_mode(x: &TokenSeq, y: &TokenSeq) -> LatticeState {
    let (m, n) = (x.len(), y.len());
    let mut st = LatticeState::empty(m, n, 1, Direction::Forward);
    st.r.iter_mut().for_each(|v| *v = 1.0);
    for i in 1..=m {
        for j in 1..=n {
            let hit = x.0[i - 1] == y.0[j - 1];
            let (left, top, diag) = (st.h(i, j - 1)[0], st.h(i - 1, j)[0], st.h(i - 1, j - 1)[0]);
            let cell = st.cell(i, j);
            let z = &mut st.z[cell * 4..cell * 4 + 4];
            let h = if hit {
                z[0] = 0.5;
                z[3] = 0.5;
                diag + 1.0
            } else if top >= left {
                z[2] = 1.0;
                top
            } else {
                z[1] = 1.0;
                left
            };
            st.h_mut(i, j)[0] = h;
        }
    }
    st
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{bilinear, relu, Mat};
    use crate::params::ModelConfig;
    use proptest::prelude::*;

    fn cfg(de: usize, c: usize, d: usize, bi: bool) -> ModelConfig {
        ModelConfig { vocab_size: 8, embed_dim: de, interaction_dim: c, hidden_dim: d, n_out: 1, bidirectional: bi }
    }

    fn seq(v: &[usize]) -> TokenSeq {
        TokenSeq(v.to_vec())
    }

    #[test]
    fn embed_lookup() {
        let p = ParamSet::random(cfg(3, 2, 2, false), 0.5, 3).unwrap();
        let e = embed(&seq(&[0, 4, 4, 7]), &p).unwrap();
        assert_eq!(e[0].as_slice(), p.embed.row(0));
        assert_eq!(e[1].as_slice(), p.embed.row(4));
        assert_eq!(e[3].as_slice(), p.embed.row(7));
        assert!(embed(&seq(&[8]), &p).is_err());

        let z = ParamSet::zeros(cfg(3, 2, 2, false)).unwrap();
        assert!(embed(&seq(&[1, 2]), &z).unwrap().iter().all(|v| v.max_abs() == 0.0));
    }

    #[test]
    fn zero_params_give_zero_everything() {
        let p = ParamSet::zeros(cfg(3, 2, 2, false)).unwrap();
        let s = interaction_tensor(&seq(&[1, 2, 3]), &seq(&[3, 4]), &p).unwrap();
        assert!(s.values.iter().all(|&x| x == 0.0));

        let nonzero = InteractionTensor::new(3, 2, 2, (0..12).map(|x| x as f64).collect()).unwrap();
        let st = spatial_gru_forward(&nonzero, &p.gru_fwd, Direction::Forward).unwrap();
        for i in 0..=3 {
            for j in 0..=2 {
                assert!(st.h(i, j).iter().all(|&x| x == 0.0));
            }
        }
        for i in 1..=3 {
            for j in 1..=2 {
                for g in st.z(i, j) {
                    assert!(g.iter().all(|&x| x == 0.25));
                }
            }
        }
    }

    #[test]
    fn single_cell_interaction_matches_composition() {
        let p = ParamSet::random(cfg(3, 2, 2, false), 0.7, 11).unwrap();
        let s = interaction_tensor(&seq(&[2]), &seq(&[5]), &p).unwrap();
        let u = p.embed.row(2);
        let v = p.embed.row(5);
        let bil = bilinear(&p.ntn_t, u, v).unwrap();
        let lin = p.ntn_w.matvec(&[u, v].concat()).unwrap();
        let pre = bil.add(&lin).unwrap().add(&p.ntn_b).unwrap();
        let want = relu(pre.as_slice());
        for k in 0..2 {
            assert!((s.at(0, 0)[k] - want.0[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_ntn_transposes_grid() {
        let mut p = ParamSet::random(cfg(3, 2, 2, false), 0.5, 5).unwrap();
        // symmetric slices and W = [A A]
        for k in 0..2 {
            for r in 0..3 {
                for c in 0..r {
                    let v = p.ntn_t.get(k, r, c);
                    p.ntn_t.set(k, c, r, v);
                }
            }
            for c in 0..3 {
                let v = p.ntn_w.get(k, c);
                p.ntn_w.set(k, c + 3, v);
            }
        }
        let a = seq(&[1, 2, 3, 7]);
        let b = seq(&[0, 6, 2]);
        let ab = interaction_tensor(&a, &b, &p).unwrap();
        let ba = interaction_tensor(&b, &a, &p).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..2 {
                    assert!((ab.at(i, j)[k] - ba.at(j, i)[k]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn single_cell_lattice_by_hand() {
        // d = 1, c = 1: q = (0, 0, 0, s)
        let mut p = ParamSet::zeros(ModelConfig { vocab_size: 2, embed_dim: 1, interaction_dim: 1, hidden_dim: 1, n_out: 1, bidirectional: false }).unwrap();
        let g = &mut p.gru_fwd;
        let s = 0.8;
        let wz = [0.3, -0.2, 0.5, 0.1];
        let bz = [0.05, 0.1, -0.3, 0.2];
        for k in 0..4 {
            g.wz[k] = Mat::from_vec(1, 4, vec![0.9, -0.4, 0.2, wz[k]]).unwrap();
            g.bz[k] = Vector(vec![bz[k]]);
        }
        for k in 0..3 {
            g.wr[k] = Mat::from_vec(1, 4, vec![0.1, 0.1, 0.1, 0.4 + k as f64]).unwrap();
            g.br[k] = Vector(vec![-0.1]);
        }
        g.w = Mat::from_vec(1, 1, vec![1.3]).unwrap();
        g.u = Mat::from_vec(1, 3, vec![0.7, -0.7, 0.2]).unwrap();
        g.b = Vector(vec![-0.25]);
        let grid = InteractionTensor::new(1, 1, 1, vec![s]).unwrap();
        let st = spatial_gru_forward(&grid, g, Direction::Forward).unwrap();

        // by hand: all neighbours are zero so only the s-column and biases matter
        let zp: Vec<f64> = (0..4).map(|k| wz[k] * s + bz[k]).collect();
        let denom: f64 = zp.iter().map(|x| x.exp()).sum();
        let zi = zp[0].exp() / denom;
        let cand = (1.3 * s - 0.25f64).tanh();
        let want = zi * cand;
        assert!((st.h(1, 1)[0] - want).abs() < 1e-12);
        let rl = 1.0 / (1.0 + (-(0.4 * s - 0.1f64)).exp());
        assert!((st.r(1, 1)[0][0] - rl).abs() < 1e-12);
    }

    #[test]
    fn score_cases() {
        let mut p = ParamSet::random(cfg(2, 2, 3, false), 0.5, 1).unwrap();
        let h = [0.3, -0.2, 0.9];
        p.score_w = Mat::zeros(1, 3);
        assert_eq!(score(&h, &p).unwrap().0, p.score_b.0);
        p.score_w = Mat::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(score(&h, &p).unwrap().0[0], -0.2 + p.score_b.0[0]);
        assert!(score(&h[..2], &p).is_err());
    }

    #[test]
    fn match_score_composes() {
        for bi in [false, true] {
            let p = ParamSet::random(cfg(3, 3, 3, bi), 0.3, 9).unwrap();
            let a = seq(&[1, 2, 3, 4]);
            let b = seq(&[4, 5, 1]);
            let once = match_score(&a, &b, &p).unwrap();
            let twice = match_score(&a, &b, &p).unwrap();
            assert_eq!(once.0[0].to_bits(), twice.0[0].to_bits());
            if !bi {
                let s = interaction_tensor(&a, &b, &p).unwrap();
                let st = spatial_gru_forward(&s, &p.gru_fwd, Direction::Forward).unwrap();
                assert_eq!(score(st.final_state(), &p).unwrap(), once);
            }
        }
    }

    #[test]
    fn bidirectional_symmetric_instance() {
        // palindromic sequences and tied direction params: both scans see the
        // same grid, so their final states coincide
        let mut p = ParamSet::random(cfg(3, 2, 3, true), 0.4, 21).unwrap();
        p.gru_bwd = Some(p.gru_fwd.clone());
        let a = seq(&[1, 2, 1]);
        let b = seq(&[3, 4, 4, 3]);
        let pass = forward(&a, &b, &p).unwrap();
        let bwd = pass.bwd.unwrap();
        for k in 0..3 {
            assert_eq!(pass.fwd.final_state()[k].to_bits(), bwd.final_state()[k].to_bits());
        }
    }

    #[test]
    fn empty_or_out_of_range_inputs_rejected() {
        let p = ParamSet::random(cfg(2, 2, 2, false), 0.1, 0).unwrap();
        assert!(match_score(&seq(&[]), &seq(&[1]), &p).is_err());
        assert!(match_score(&seq(&[1]), &seq(&[9]), &p).is_err());
    }

    #[test]
    fn exact_mode_examples() {
        // A B C D E vs F A C G D
        let x = seq(&[0, 1, 2, 3, 4]);
        let y = seq(&[5, 0, 2, 6, 3]);
        assert_eq!(exact_lcs_mode(&x, &y).final_state()[0], 3.0);
        assert_eq!(exact_lcs_mode(&x, &x).final_state()[0], 5.0);
        assert_eq!(exact_lcs_mode(&x, &seq(&[7, 8, 9])).final_state()[0], 0.0);
        assert!(!exact_lcs_mode(&x, &y).has_cache());
    }

    fn relabel(p: &ParamSet, perm: &[usize]) -> ParamSet {
        let mut q = p.clone();
        for (old, &new) in perm.iter().enumerate() {
            q.embed.row_mut(new).copy_from_slice(p.embed.row(old));
        }
        q
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn gates_form_simplex_and_states_stay_bounded(
            seed in 0u64..10_000,
            m in 1usize..7,
            n in 1usize..7,
            bi in any::<bool>(),
        ) {
            let p = ParamSet::random(cfg(3, 3, 3, bi), 0.1, seed).unwrap();
            let a = TokenSeq((0..m).map(|k| (seed as usize + 3 * k) % 8).collect());
            let b = TokenSeq((0..n).map(|k| (seed as usize / 7 + 5 * k) % 8).collect());
            let pass = forward(&a, &b, &p).unwrap();
            let lattices: Vec<&LatticeState> = std::iter::once(&pass.fwd).chain(pass.bwd.as_ref()).collect();
            for st in lattices {
                for i in 0..=m {
                    prop_assert!(st.h(i, 0).iter().all(|&x| x == 0.0));
                }
                for j in 0..=n {
                    prop_assert!(st.h(0, j).iter().all(|&x| x == 0.0));
                }
                for i in 1..=m {
                    for j in 1..=n {
                        let z = st.z(i, j);
                        for k in 0..3 {
                            let s: f64 = z.iter().map(|g| g[k]).sum();
                            prop_assert!((s - 1.0).abs() < 1e-10);
                        }
                        for g in st.r(i, j) {
                            prop_assert!(g.iter().all(|&x| x > 0.0 && x < 1.0));
                        }
                        let bound = [st.h(i, j - 1), st.h(i - 1, j), st.h(i - 1, j - 1)]
                            .iter()
                            .map(|v| v.iter().fold(0.0f64, |a, x| a.max(x.abs())))
                            .fold(1.0f64, f64::max);
                        let here = st.h(i, j).iter().fold(0.0f64, |a, x| a.max(x.abs()));
                        prop_assert!(here <= bound + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn relabeling_vocabulary_is_invisible(seed in 0u64..1000, shift in 1usize..8) {
            let p = ParamSet::random(cfg(3, 2, 2, true), 0.3, seed).unwrap();
            let perm: Vec<usize> = (0..8).map(|k| (k + shift) % 8).collect();
            let q = relabel(&p, &perm);
            let a = seq(&[0, 3, 5, 1]);
            let b = seq(&[7, 3, 2]);
            let pa = TokenSeq(a.0.iter().map(|&t| perm[t]).collect());
            let pb = TokenSeq(b.0.iter().map(|&t| perm[t]).collect());
            let s1 = match_score(&a, &b, &p).unwrap();
            let s2 = match_score(&pa, &pb, &q).unwrap();
            prop_assert_eq!(s1.0[0].to_bits(), s2.0[0].to_bits());
        }
    }
}
