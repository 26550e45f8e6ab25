//! Trainable parameters, addressed by stable names.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{Mat, Tensor3, Vector};

/// Architecture sizes. Everything else about the shapes follows from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub interaction_dim: usize,
    pub hidden_dim: usize,
    /// 1 for regression and ranking, 2 for binary classification.
    pub n_out: usize,
    pub bidirectional: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.interaction_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Input(format!("all model dimensions must be positive: {self:?}")));
        }
        if !(1..=2).contains(&self.n_out) {
            return Err(Error::Input(format!("n_out must be 1 or 2, got {}", self.n_out)));
        }
        Ok(())
    }

    /// Width of the state fed to the scorer.
    pub fn score_width(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden_dim
        } else {
            self.hidden_dim
        }
    }

    /// Width of the gate input `q`.
    pub fn gate_input_dim(&self) -> usize {
        3 * self.hidden_dim + self.interaction_dim
    }
}

/// Spatial GRU parameters for one scan direction.
///
/// Reset gates are ordered (left, top, diagonal); update gates are ordered
/// (input, left, top, diagonal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub wr: [Mat; 3],
    pub br: [Vector; 3],
    pub wz: [Mat; 4],
    pub bz: [Vector; 4],
    /// Candidate-state input weights, `d × c`.
    pub w: Mat,
    /// Candidate-state recurrent weights, `d × 3d`, columns laid out against
    /// `(h_left, h_top, h_diag)`.
    pub u: Mat,
    pub b: Vector,
}

pub const RESET_GATES: [&str; 3] = ["l", "t", "d"];
pub const UPDATE_GATES: [&str; 4] = ["i", "l", "t", "d"];

impl GruParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let qd = cfg.gate_input_dim();
        GruParams {
            wr: std::array::from_fn(|_| Mat::zeros(d, qd)),
            br: std::array::from_fn(|_| Vector::zeros(d)),
            wz: std::array::from_fn(|_| Mat::zeros(d, qd)),
            bz: std::array::from_fn(|_| Vector::zeros(d)),
            w: Mat::zeros(d, cfg.interaction_dim),
            u: Mat::zeros(d, 3 * d),
            b: Vector::zeros(d),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        for (k, g) in RESET_GATES.iter().enumerate() {
            f(format!("{prefix}.gru_Wr_{g}"), vec![self.wr[k].rows(), self.wr[k].cols()], self.wr[k].data());
            f(format!("{prefix}.gru_br_{g}"), vec![self.br[k].len()], self.br[k].as_slice());
        }
        for (k, g) in UPDATE_GATES.iter().enumerate() {
            f(format!("{prefix}.gru_Wz_{g}"), vec![self.wz[k].rows(), self.wz[k].cols()], self.wz[k].data());
            f(format!("{prefix}.gru_bz_{g}"), vec![self.bz[k].len()], self.bz[k].as_slice());
        }
        f(format!("{prefix}.gru_W"), vec![self.w.rows(), self.w.cols()], self.w.data());
        f(format!("{prefix}.gru_U"), vec![self.u.rows(), self.u.cols()], self.u.data());
        f(format!("{prefix}.gru_b"), vec![self.b.len()], self.b.as_slice());
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        let GruParams { wr, br, wz, bz, w, u, b } = self;
        for (m, v) in wr.iter_mut().zip(br.iter_mut()) {
            out.push(m.data_mut());
            out.push(v.as_mut_slice());
        }
        for (m, v) in wz.iter_mut().zip(bz.iter_mut()) {
            out.push(m.data_mut());
            out.push(v.as_mut_slice());
        }
        out.push(w.data_mut());
        out.push(u.data_mut());
        out.push(b.as_mut_slice());
    }
}

/// Every trainable array of the model.
///
/// Gradients use the same type: a [`GradSet`] is a `ParamSet` holding
/// derivatives instead of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub config: ModelConfig,
    /// `vocab_size × embed_dim`
    pub embed: Mat,
    /// `c × d_e × d_e`
    pub ntn_t: Tensor3,
    /// `c × 2 d_e`
    pub ntn_w: Mat,
    pub ntn_b: Vector,
    pub gru_fwd: GruParams,
    /// Present only for the bidirectional model.
    pub gru_bwd: Option<GruParams>,
    /// `n_out × d` (or `n_out × 2d` when bidirectional)
    pub score_w: Mat,
    pub score_b: Vector,
}

pub type GradSet = ParamSet;

/// Metadata about one named array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSet {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let de = config.embed_dim;
        let c = config.interaction_dim;
        Ok(ParamSet {
            config,
            embed: Mat::zeros(config.vocab_size, de),
            ntn_t: Tensor3::zeros(c, de, de),
            ntn_w: Mat::zeros(c, 2 * de),
            ntn_b: Vector::zeros(c),
            gru_fwd: GruParams::zeros(&config),
            gru_bwd: config.bidirectional.then(|| GruParams::zeros(&config)),
            score_w: Mat::zeros(config.n_out, config.score_width()),
            score_b: Vector::zeros(config.n_out),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Every parameter drawn from `Uniform(-scale, scale)`, in name order.
    pub fn random(config: ModelConfig, scale: f64, seed: u64) -> Result<Self> {
        let mut p = ParamSet::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for arr in p.arrays_mut() {
            for x in arr.iter_mut() {
                *x = if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 };
            }
        }
        Ok(p)
    }

    /// Visit all arrays in the canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, Vec<usize>, &'a [f64])) {
        let f: &mut dyn FnMut(String, Vec<usize>, &'a [f64]) = &mut f;
        f("embed".into(), vec![self.embed.rows(), self.embed.cols()], self.embed.data());
        f(
            "ntn_T".into(),
            vec![self.ntn_t.slices(), self.ntn_t.rows(), self.ntn_t.cols()],
            self.ntn_t.data(),
        );
        f("ntn_W".into(), vec![self.ntn_w.rows(), self.ntn_w.cols()], self.ntn_w.data());
        f("ntn_b".into(), vec![self.ntn_b.len()], self.ntn_b.as_slice());
        self.gru_fwd.visit("fwd", f);
        if let Some(g) = &self.gru_bwd {
            g.visit("bwd", f);
        }
        f("score_W".into(), vec![self.score_w.rows(), self.score_w.cols()], self.score_w.data());
        f("score_b".into(), vec![self.score_b.len()], self.score_b.as_slice());
    }

    /// Names, shapes and data of all arrays, in canonical order.
    pub fn arrays(&self) -> Vec<(ArrayInfo, &[f64])> {
        let mut out = Vec::new();
        self.visit(|name, shape, data| out.push((ArrayInfo { name, shape }, data)));
        out
    }

    pub fn array_infos(&self) -> Vec<ArrayInfo> {
        self.arrays().into_iter().map(|(i, _)| i).collect()
    }

    /// Mutable views of all arrays, in the same order as [`ParamSet::arrays`].
    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let ParamSet { embed, ntn_t, ntn_w, ntn_b, gru_fwd, gru_bwd, score_w, score_b, .. } = self;
        let mut out: Vec<&mut [f64]> = vec![embed.data_mut(), ntn_t.data_mut(), ntn_w.data_mut(), ntn_b.as_mut_slice()];
        gru_fwd.visit_mut(&mut out);
        if let Some(g) = gru_bwd {
            g.visit_mut(&mut out);
        }
        out.push(score_w.data_mut());
        out.push(score_b.as_mut_slice());
        out
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays().into_iter().find(|(i, _)| i.name == name).map(|(_, d)| d)
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let idx = self.array_infos().iter().position(|i| i.name == name)?;
        self.arrays_mut().into_iter().nth(idx)
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|(_, d)| d.len()).sum()
    }

    pub fn fill(&mut self, v: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.config == other.config
    }

    fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if !self.same_layout(other) {
            return shape_err(format!("parameter layouts differ: {:?} vs {:?}", self.config, other.config));
        }
        Ok(())
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += a · other`
    pub fn axpy(&mut self, a: f64, other: &ParamSet) -> Result<()> {
        self.check_layout(other)?;
        for (dst, (_, src)) in self.arrays_mut().into_iter().zip(other.arrays()) {
            crate::linalg::axpy(a, src, dst);
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for arr in self.arrays_mut() {
            arr.iter_mut().for_each(|x| *x *= a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, d)| d.iter().all(|x| x.is_finite()))
    }

    /// True when every value has the same bit pattern.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.config == other.config
            && self
                .arrays()
                .iter()
                .zip(other.arrays())
                .all(|((_, a), (_, b))| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Largest absolute value over all arrays.
    pub fn max_abs(&self) -> f64 {
        self.arrays().iter().flat_map(|(_, d)| d.iter()).fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(bidirectional: bool) -> ModelConfig {
        ModelConfig { vocab_size: 5, embed_dim: 3, interaction_dim: 2, hidden_dim: 4, n_out: 1, bidirectional }
    }

    #[test]
    fn names_are_unique_and_shapes_match_data() {
        for bi in [false, true] {
            let mut p = ParamSet::random(cfg(bi), 0.1, 1).unwrap();
            let arrays = p.arrays();
            let mut names: Vec<_> = arrays.iter().map(|(i, _)| i.name.clone()).collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n);
            assert_eq!(n, if bi { 4 + 2 * 17 + 2 } else { 4 + 17 + 2 });
            for (info, data) in &arrays {
                assert_eq!(info.shape.iter().product::<usize>(), data.len(), "{}", info.name);
            }
            assert_eq!(p.arrays_mut().len(), n);
        }
    }

    #[test]
    fn random_is_seeded_and_bounded() {
        let a = ParamSet::random(cfg(true), 0.1, 7).unwrap();
        let b = ParamSet::random(cfg(true), 0.1, 7).unwrap();
        let c = ParamSet::random(cfg(true), 0.1, 8).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
        assert!(a.max_abs() <= 0.1);
    }

    #[test]
    fn lookup_by_name() {
        let mut p = ParamSet::zeros(cfg(false)).unwrap();
        p.array_mut("fwd.gru_U").unwrap()[3] = 2.5;
        assert_eq!(p.gru_fwd.u.data()[3], 2.5);
        assert!(p.array("bwd.gru_U").is_none());
        assert_eq!(p.array("score_W").unwrap().len(), 4);
    }

    #[test]
    fn mismatched_layouts_refuse_to_combine() {
        let mut a = ParamSet::zeros(cfg(false)).unwrap();
        let b = ParamSet::zeros(cfg(true)).unwrap();
        assert!(a.add_assign(&b).is_err());
    }
}
