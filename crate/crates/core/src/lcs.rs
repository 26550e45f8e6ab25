//! Longest common subsequence: the DP table, its backtrace, the gate-driven
//! backtrace of a lattice scan, and the synthetic datasets built on top.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatticeState, TokenSeq};
use crate::train::TrainInstance;

/// `(m+1) × (n+1)` LCS lengths of all prefix pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpTable {
    pub m: usize,
    pub n: usize,
    c: Vec<u32>,
}

impl DpTable {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.c[i * (self.n + 1) + j]
    }

    /// LCS length of the full sequences.
    pub fn length(&self) -> u32 {
        self.get(self.m, self.n)
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        (0..=self.m).map(|i| (0..=self.n).map(|j| self.get(i, j)).collect()).collect()
    }

    /// Check the boundary, monotonicity and unit-diagonal-step invariants.
    pub fn check_invariants(&self) -> Result<()> {
        for i in 0..=self.m {
            for j in 0..=self.n {
                let c = self.get(i, j);
                if (i == 0 || j == 0) && c != 0 {
                    return Err(Error::Internal(format!("nonzero boundary at ({i},{j})")));
                }
                if i > 0 && c < self.get(i - 1, j) || j > 0 && c < self.get(i, j - 1) {
                    return Err(Error::Internal(format!("table decreases at ({i},{j})")));
                }
                if i > 0 && j > 0 && c - self.get(i - 1, j - 1) > 1 {
                    return Err(Error::Internal(format!("diagonal step > 1 at ({i},{j})")));
                }
            }
        }
        Ok(())
    }
}

pub fn lcs_table(x: &TokenSeq, y: &TokenSeq) -> DpTable {
    let (m, n) = (x.len(), y.len());
    let mut c = vec![0u32; (m + 1) * (n + 1)];
    let w = n + 1;
    for i in 1..=m {
        for j in 1..=n {
            let hit = u32::from(x.0[i - 1] == y.0[j - 1]);
            c[i * w + j] = c[i * w + j - 1].max(c[(i - 1) * w + j]).max(c[(i - 1) * w + j - 1] + hit);
        }
    }
    DpTable { m, n, c }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Move {
    Left,
    Top,
    Diagonal,
}

impl Move {
    pub fn name(self) -> &'static str {
        match self {
            Move::Left => "left",
            Move::Top => "top",
            Move::Diagonal => "diagonal",
        }
    }

    fn apply(self, (i, j): (usize, usize)) -> (usize, usize) {
        match self {
            Move::Left => (i, j - 1),
            Move::Top => (i - 1, j),
            Move::Diagonal => (i - 1, j - 1),
        }
    }
}

/// A monotone walk from `(m, n)` to the first boundary cell reached.
/// `positions[k+1]` is `moves[k]` applied to `positions[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPath {
    pub m: usize,
    pub n: usize,
    pub positions: Vec<(usize, usize)>,
    pub moves: Vec<Move>,
}

impl MatchPath {
    fn walk(m: usize, n: usize, mut step: impl FnMut(usize, usize) -> Result<Move>) -> Result<Self> {
        let mut pos = (m, n);
        let mut path = MatchPath { m, n, positions: vec![pos], moves: Vec::new() };
        while pos.0 > 0 && pos.1 > 0 {
            let mv = step(pos.0, pos.1)?;
            pos = mv.apply(pos);
            path.moves.push(mv);
            path.positions.push(pos);
        }
        Ok(path)
    }

    /// Build a path from `(m, n)` by replaying moves. Errors if a move leaves
    /// the grid or the walk continues past a boundary.
    pub fn from_moves(m: usize, n: usize, moves: &[Move]) -> Result<Self> {
        let mut it = moves.iter();
        let path = Self::walk(m, n, |_, _| it.next().copied().ok_or_else(|| Error::Input("path ends inside the grid".into())))?;
        if it.next().is_some() {
            return Err(Error::Input("path continues past the boundary".into()));
        }
        Ok(path)
    }

    /// Positions with `i, j >= 1`.
    pub fn interior_cells(&self) -> BTreeSet<(usize, usize)> {
        self.positions.iter().copied().filter(|&(i, j)| i > 0 && j > 0).collect()
    }

    /// Cells left by a diagonal step where the two symbols are equal, i.e.
    /// the aligned positions of the common subsequence the path spells out.
    pub fn diagonal_match_cells(&self, x: &TokenSeq, y: &TokenSeq) -> Vec<(usize, usize)> {
        self.positions
            .iter()
            .zip(&self.moves)
            .filter(|&(&(i, j), &mv)| mv == Move::Diagonal && x.0[i - 1] == y.0[j - 1])
            .map(|(&p, _)| p)
            .collect()
    }

    /// `true` when every step moves by exactly one of the three moves.
    pub fn is_monotone(&self) -> bool {
        self.moves.len() + 1 == self.positions.len()
            && self.positions[0] == (self.m, self.n)
            && self.positions.windows(2).zip(&self.moves).all(|(w, &mv)| w[0].0 > 0 && w[0].1 > 0 && mv.apply(w[0]) == w[1])
    }

    /// CSV with header `step,i,j,move`; the move column names the step taken
    /// out of that position (empty on the last row).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,i,j,move\n");
        for (k, &(i, j)) in self.positions.iter().enumerate() {
            let mv = self.moves.get(k).map_or("", |m| m.name());
            out.push_str(&format!("{k},{i},{j},{mv}\n"));
        }
        out
    }
}

pub fn dp_backtrace(table: &DpTable, x: &TokenSeq, y: &TokenSeq) -> Result<MatchPath> {
    if table.m != x.len() || table.n != y.len() {
        return Err(Error::Internal(format!(
            "table is {}x{} but sequences have lengths {} and {}",
            table.m,
            table.n,
            x.len(),
            y.len()
        )));
    }
    MatchPath::walk(table.m, table.n, |i, j| {
        let c = table.get(i, j);
        if x.0[i - 1] == y.0[j - 1] && c == table.get(i - 1, j - 1) + 1 {
            return Ok(Move::Diagonal);
        }
        let (top, left) = (table.get(i - 1, j), table.get(i, j - 1));
        if c != top.max(left) {
            return Err(Error::Internal(format!("table inconsistent with sequences at ({i},{j})")));
        }
        Ok(if top >= left { Move::Top } else { Move::Left })
    })
}

/// How gate vectors are reduced to one number per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DimSelect {
    /// A single hidden dimension (0-based).
    Dim(usize),
    /// Mean over all hidden dimensions.
    Average,
}

/// Follow the largest of `z_l`, `z_t`, `z_d` at each cell. Ties go to the
/// diagonal, then top. `z_i` is not a direction and is ignored.
pub fn gate_backtrace(state: &LatticeState, dim_select: DimSelect) -> Result<MatchPath> {
    if let DimSelect::Dim(k) = dim_select {
        if k >= state.d {
            return Err(Error::Input(format!("dimension {k} out of range for hidden size {}", state.d)));
        }
    }
    let reduce = |v: &[f64]| match dim_select {
        DimSelect::Dim(k) => v[k],
        DimSelect::Average => v.iter().sum::<f64>() / v.len() as f64,
    };
    MatchPath::walk(state.m, state.n, |i, j| {
        let [_, zl, zt, zd] = state.z(i, j);
        let (l, t, d) = (reduce(zl), reduce(zt), reduce(zd));
        Ok(if d >= t && d >= l {
            Move::Diagonal
        } else if t >= l {
            Move::Top
        } else {
            Move::Left
        })
    })
}

/// Jaccard overlap of the interior cells of two paths on the same grid.
/// Two paths with no interior cells agree fully.
pub fn path_agreement(p1: &MatchPath, p2: &MatchPath) -> Result<f64> {
    if (p1.m, p1.n) != (p2.m, p2.n) {
        return Err(Error::Input(format!("paths on different grids: {}x{} vs {}x{}", p1.m, p1.n, p2.m, p2.n)));
    }
    let a = p1.interior_cells();
    let b = p2.interior_cells();
    let union = a.union(&b).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection(&b).count() as f64 / union as f64)
}

/// Walk from `(m, n)` choosing uniformly among the three moves at each step.
pub fn random_monotone_path<R: Rng>(m: usize, n: usize, rng: &mut R) -> MatchPath {
    let all = [Move::Left, Move::Top, Move::Diagonal];
    MatchPath::walk(m, n, |_, _| Ok(all[rng.random_range(0..3)])).expect("random walk cannot fail")
}

/// One generated pair with its normalized LCS label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPair {
    pub x: TokenSeq,
    pub y: TokenSeq,
    pub lcs: u32,
    pub label: f64,
}

impl SimPair {
    pub fn new(x: TokenSeq, y: TokenSeq) -> Self {
        let lcs = lcs_table(&x, &y).length();
        let label = normalized_lcs(lcs, x.len(), y.len());
        SimPair { x, y, lcs, label }
    }

    pub fn to_instance(&self) -> TrainInstance {
        TrainInstance::Regression { s1: self.x.clone(), s2: self.y.clone(), y: self.label }
    }
}

/// Tag stored with datasets whose labels come from [`normalized_lcs`].
pub const NORMALIZATION: &str = "lcs/max_len";

/// LCS length divided by the longer sequence length (0 for two empty inputs).
pub fn normalized_lcs(lcs: u32, m: usize, n: usize) -> f64 {
    let len = m.max(n);
    if len == 0 {
        0.0
    } else {
        lcs as f64 / len as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { alphabet: 10, min_len: 5, max_len: 20, n_train: 10_000, n_test: 1_000, seed: 2016 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Input(format!(
                "bad simulation config: alphabet {}, lengths {}..{}",
                self.alphabet, self.min_len, self.max_len
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Input("dataset counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDataset {
    pub config: SimConfig,
    pub train: Vec<SimPair>,
    pub test: Vec<SimPair>,
}

impl SimDataset {
    pub fn mean_label(pairs: &[SimPair]) -> f64 {
        pairs.iter().map(|p| p.label).sum::<f64>() / pairs.len().max(1) as f64
    }
}

fn random_seq<R: Rng>(rng: &mut R, alphabet: usize, min_len: usize, max_len: usize) -> TokenSeq {
    let len = rng.random_range(min_len..=max_len);
    TokenSeq((0..len).map(|_| rng.random_range(0..alphabet)).collect())
}

/// Draw `count` pairs with uniform lengths in `min_len..=max_len` and
/// uniform symbols.
pub fn sim_pairs<R: Rng>(rng: &mut R, config: &SimConfig, count: usize) -> Vec<SimPair> {
    (0..count)
        .map(|_| {
            let x = random_seq(rng, config.alphabet, config.min_len, config.max_len);
            let y = random_seq(rng, config.alphabet, config.min_len, config.max_len);
            SimPair::new(x, y)
        })
        .collect()
}

/// Training pairs followed by test pairs, from one seeded stream.
pub fn gen_dataset(config: &SimConfig) -> Result<SimDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train = sim_pairs(&mut rng, config, config.n_train);
    let test = sim_pairs(&mut rng, config, config.n_test);
    Ok(SimDataset { config: config.clone(), train, test })
}

/// Parameters of the planted-subsequence matching tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Length of the subsequence shared by the query and its positive.
    pub planted: usize,
    /// Negatives are resampled until their LCS with the query is at most this.
    pub max_negative_lcs: u32,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig { alphabet: 12, min_len: 6, max_len: 10, planted: 5, max_negative_lcs: 2, seed: 7 }
    }
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet < 2 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Input("bad planted-task alphabet or lengths".into()));
        }
        if self.planted == 0 || self.planted > self.min_len {
            return Err(Error::Input(format!("planted length {} must be in 1..={}", self.planted, self.min_len)));
        }
        if self.max_negative_lcs as usize >= self.planted {
            return Err(Error::Input("negatives must share less than the planted length".into()));
        }
        Ok(())
    }
}

struct Planted<'a> {
    config: &'a PlantedConfig,
    rng: ChaCha8Rng,
}

impl Planted<'_> {
    fn query(&mut self) -> TokenSeq {
        let c = self.config;
        random_seq(&mut self.rng, c.alphabet, c.min_len, c.max_len)
    }

    /// Random sequence containing `planted` symbols of `q`, in order.
    fn positive(&mut self, q: &TokenSeq) -> TokenSeq {
        let c = self.config;
        let k = c.planted;
        let mut from: Vec<usize> = (0..q.len()).collect();
        from.shuffle(&mut self.rng);
        from.truncate(k);
        from.sort_unstable();
        let mut s = random_seq(&mut self.rng, c.alphabet, c.min_len, c.max_len);
        let mut at: Vec<usize> = (0..s.len()).collect();
        at.shuffle(&mut self.rng);
        at.truncate(k);
        at.sort_unstable();
        for (&src, &dst) in from.iter().zip(&at) {
            s.0[dst] = q.0[src];
        }
        s
    }

    fn negative(&mut self, q: &TokenSeq) -> TokenSeq {
        let c = self.config;
        loop {
            let s = random_seq(&mut self.rng, c.alphabet, c.min_len, c.max_len);
            if lcs_table(q, &s).length() <= c.max_negative_lcs {
                return s;
            }
        }
    }
}

/// Ranking lists of one positive and `negatives` negatives per query, given
/// as hinge triples sharing a `qid`.
pub fn gen_ranking(config: &PlantedConfig, queries: usize, negatives: usize) -> Result<Vec<TrainInstance>> {
    config.validate()?;
    if negatives == 0 {
        return Err(Error::Input("need at least one negative per query".into()));
    }
    let mut g = Planted { config, rng: ChaCha8Rng::seed_from_u64(config.seed) };
    let mut out = Vec::with_capacity(queries * negatives);
    for qid in 0..queries {
        let q = g.query();
        let pos = g.positive(&q);
        for _ in 0..negatives {
            let neg = g.negative(&q);
            out.push(TrainInstance::Ranking { qid, s1: q.clone(), s2: pos.clone(), s2_neg: neg });
        }
    }
    Ok(out)
}

/// Balanced binary pairs: label 1 for a planted positive, 0 for a negative.
pub fn gen_classification(config: &PlantedConfig, count: usize) -> Result<Vec<TrainInstance>> {
    config.validate()?;
    let mut g = Planted { config, rng: ChaCha8Rng::seed_from_u64(config.seed) };
    Ok((0..count)
        .map(|k| {
            let q = g.query();
            let (s2, label) = if k % 2 == 0 { (g.positive(&q), 1) } else { (g.negative(&q), 0) };
            TrainInstance::Classification { s1: q, s2, label }
        })
        .collect())
}

/// Map `A..` to ids `0..`. Errors on characters outside `A..A+alphabet`.
pub fn letters(s: &str, alphabet: usize) -> Result<TokenSeq> {
    s.chars()
        .map(|ch| {
            let id = (ch as u32).wrapping_sub('A' as u32) as usize;
            if id < alphabet {
                Ok(id)
            } else {
                Err(Error::Input(format!("symbol {ch:?} outside the {alphabet}-letter alphabet")))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(TokenSeq)
}
