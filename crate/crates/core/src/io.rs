//! File formats: JSONL datasets, vocabularies, text embeddings, binary
//! checkpoints, heatmaps and gate dumps.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic      8 bytes  "MSRNNCKP"
//! version    u32      FORMAT_VERSION
//! meta_len   u64
//! meta       meta_len bytes of JSON (CheckpointMeta)
//! sections   u8 count, then per section:
//!   tag      u8       0 = params, 1 = resume params, 2 = AdaGrad accumulators, 3 = resume best params
//!   arrays   u32 count, then per array:
//!     name   u16 length + UTF-8 bytes
//!     shape  u8 rank + rank × u64
//!     data   product(shape) × f64
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{LatticeState, TokenSeq};
use crate::params::{ModelConfig, ParamSet};
use crate::train::{AdaGradState, EpochRecord, Metric, TrainConfig, TrainInstance, TrainState};

// ---------------------------------------------------------------- datasets

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub vocab_size: usize,
    /// How regression labels were normalized, if they were.
    #[serde(default)]
    pub normalization: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Surface form of each id, when the vocabulary is not just `0..n`.
    #[serde(default)]
    pub tokens: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum HeaderLine {
    Header(DatasetHeader),
}

pub fn dataset_to_string(header: &DatasetHeader, data: &[TrainInstance]) -> Result<String> {
    let mut out = serde_json::to_string(&HeaderLine::Header(header.clone())).map_err(json_err)?;
    out.push('\n');
    for inst in data {
        out.push_str(&serde_json::to_string(inst).map_err(json_err)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, data: &[TrainInstance]) -> Result<()> {
    fs::write(path, dataset_to_string(header, data)?)?;
    Ok(())
}

/// Parse a dataset. Every id is checked against the header's vocabulary
/// size, and the header must match `expected_vocab` when one is given.
pub fn parse_dataset(text: &str, expected_vocab: Option<usize>) -> Result<(DatasetHeader, Vec<TrainInstance>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty dataset file".into() })?;
    let HeaderLine::Header(header) = serde_json::from_str(first).map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
    if let Some(v) = expected_vocab {
        if v != header.vocab_size {
            return Err(Error::Input(format!("dataset vocabulary size {} does not match expected {v}", header.vocab_size)));
        }
    }
    if let Some(t) = &header.tokens {
        if t.len() != header.vocab_size {
            return Err(Error::Parse { line: 1, msg: format!("{} tokens listed for vocabulary size {}", t.len(), header.vocab_size) });
        }
    }
    let mut data = Vec::new();
    for (k, line) in lines {
        let inst: TrainInstance = serde_json::from_str(line).map_err(|e| Error::Parse { line: k + 1, msg: e.to_string() })?;
        inst.validate(header.vocab_size).map_err(|e| Error::Parse { line: k + 1, msg: e.to_string() })?;
        data.push(inst);
    }
    Ok((header, data))
}

pub fn read_dataset(path: &Path, expected_vocab: Option<usize>) -> Result<(DatasetHeader, Vec<TrainInstance>)> {
    parse_dataset(&fs::read_to_string(path)?, expected_vocab)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Internal(format!("serialization failed: {e}"))
}

// -------------------------------------------------------------- vocabulary

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("token {i} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Single capital letters `A`, `B`, ... for the synthetic tasks.
    pub fn letters(n: usize) -> Self {
        let tokens = (0..n)
            .map(|i| if i < 26 { char::from(b'A' + i as u8).to_string() } else { format!("T{i}") })
            .collect();
        Self::from_tokens(tokens).expect("generated tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encode whitespace-separated tokens. When every token is a single
    /// character, an unspaced string such as `ABCDE` is split into
    /// characters. Unknown tokens are all listed in the error.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let words: Vec<String> = if !text.contains(char::is_whitespace) && self.tokens.iter().all(|t| t.chars().count() == 1) {
            text.chars().map(String::from).collect()
        } else {
            text.split_whitespace().map(String::from).collect()
        };
        let unknown: Vec<&str> = words.iter().filter(|w| self.id(w).is_none()).map(String::as_str).collect();
        if !unknown.is_empty() {
            return Err(Error::Input(format!("tokens not in vocabulary: {}", unknown.join(" "))));
        }
        Ok(TokenSeq(words.iter().map(|w| self.index[w]).collect()))
    }
}

/// One token per line; blank lines are skipped.
pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path)?;
    Vocab::from_tokens(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

// -------------------------------------------------------------- embeddings

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedEmbeddings {
    /// `vocab × dim`, row `k` for token id `k`.
    pub matrix: Mat,
    /// Vocabulary tokens absent from the file (randomly initialized).
    pub missing: usize,
    /// Tokens defined more than once in the file; the last line wins.
    pub duplicates: Vec<String>,
    /// File lines for tokens outside the vocabulary.
    pub unused: usize,
}

/// Read word vectors in the common text format: optional `count dim`
/// first line, then `token v1 ... vdim` per line. Missing tokens are drawn
/// from `Uniform(-init_scale, init_scale)` with a generator seeded by `seed`.
pub fn load_embeddings(path: &Path, vocab: &Vocab, init_scale: f64, seed: u64) -> Result<LoadedEmbeddings> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut dim: Option<usize> = None;
    let mut declared_count: Option<usize> = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    let mut duplicates = Vec::new();
    let mut unused = 0;
    let mut lines_read = 0;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if k == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            declared_count = Some(fields[0].parse().unwrap());
            dim = Some(fields[1].parse().unwrap());
            continue;
        }
        lines_read += 1;
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Parse { line: lineno, msg: format!("non-numeric or non-finite value for {:?}", fields[0]) })?;
        if values.is_empty() {
            return Err(Error::Parse { line: lineno, msg: format!("no vector for {:?}", fields[0]) });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Input(format!("line {lineno}: vector has {} values, expected {d}", values.len())));
            }
            Some(_) => {}
        }
        match vocab.id(fields[0]) {
            Some(id) => {
                if rows[id].replace(values).is_some() {
                    duplicates.push(fields[0].to_string());
                }
            }
            None => unused += 1,
        }
    }
    if let Some(c) = declared_count {
        if c != lines_read {
            return Err(Error::Input(format!("header declares {c} vectors but the file has {lines_read}")));
        }
    }
    let dim = dim.ok_or_else(|| Error::Input("embedding file has no vectors and no dimension header".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut missing = 0;
    for row in rows {
        match row {
            Some(v) => data.extend(v),
            None => {
                missing += 1;
                data.extend((0..dim).map(|_| rng.random_range(-init_scale..=init_scale)));
            }
        }
    }
    Ok(LoadedEmbeddings { matrix: Mat::from_vec(vocab.len(), dim, data)?, missing, duplicates, unused })
}

// ------------------------------------------------------------- checkpoints

pub const MAGIC: &[u8; 8] = b"MSRNNCKP";
pub const FORMAT_VERSION: u32 = 1;

/// A saved model, optionally with everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// The parameters to use for prediction (the best ones seen so far).
    pub params: ParamSet,
    pub train_config: Option<TrainConfig>,
    pub resume: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train_config: Option<TrainConfig>,
    progress: Option<Progress>,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    lr: f64,
    eps: f64,
    steps: u64,
    epochs_done: usize,
    best_metric: Option<Metric>,
    best_epoch: usize,
    epochs_since_best: usize,
    history: Vec<EpochRecord>,
}

const SEC_PARAMS: u8 = 0;
const SEC_RESUME: u8 = 1;
const SEC_ACCUM: u8 = 2;
const SEC_BEST: u8 = 3;

fn put_arrays(out: &mut Vec<u8>, tag: u8, p: &ParamSet) {
    out.push(tag);
    let arrays = p.arrays();
    out.extend((arrays.len() as u32).to_le_bytes());
    for (info, data) in arrays {
        out.extend((info.name.len() as u16).to_le_bytes());
        out.extend(info.name.as_bytes());
        out.push(info.shape.len() as u8);
        for &s in &info.shape {
            out.extend((s as u64).to_le_bytes());
        }
        for &v in data {
            out.extend(v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: ck.params.config.clone(),
        train_config: ck.train_config.clone(),
        progress: ck.resume.as_ref().map(|s| Progress {
            lr: s.optimizer.lr,
            eps: s.optimizer.eps,
            steps: s.optimizer.steps,
            epochs_done: s.epochs_done,
            best_metric: s.best_metric,
            best_epoch: s.best_epoch,
            epochs_since_best: s.epochs_since_best,
            history: s.history.clone(),
        }),
    };
    let meta = serde_json::to_vec(&meta).map_err(json_err)?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((meta.len() as u64).to_le_bytes());
    out.extend(&meta);
    match &ck.resume {
        None => {
            out.push(1);
            put_arrays(&mut out, SEC_PARAMS, &ck.params);
        }
        Some(s) => {
            out.push(4);
            put_arrays(&mut out, SEC_PARAMS, &ck.params);
            put_arrays(&mut out, SEC_RESUME, &s.params);
            put_arrays(&mut out, SEC_ACCUM, &s.optimizer.accum);
            put_arrays(&mut out, SEC_BEST, &s.best_params);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Binary { offset: self.pos, msg: msg.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Read one array section into a zeroed set with the expected layout.
    fn arrays(&mut self, config: &ModelConfig) -> Result<ParamSet> {
        let mut p = ParamSet::zeros(config.clone())?;
        let infos = p.array_infos();
        let count = self.u32()? as usize;
        if count != infos.len() {
            return self.err(format!("{count} arrays stored, model has {}", infos.len()));
        }
        for (info, dst) in infos.iter().zip(p.arrays_mut()) {
            let len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(len)?).map_err(|_| Error::Binary { offset: self.pos, msg: "array name is not UTF-8".into() })?;
            if name != info.name {
                return self.err(format!("expected array {:?}, found {name:?}", info.name));
            }
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if shape != info.shape {
                return self.err(format!("array {name} has shape {shape:?}, model expects {:?}", info.shape));
            }
            let raw = self.take(dst.len() * 8)?;
            for (d, b) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *d = f64::from_le_bytes(b.try_into().unwrap());
            }
        }
        Ok(p)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Binary { offset: 0, msg: "not a checkpoint (bad magic)".into() });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: FORMAT_VERSION });
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Binary { offset: 20, msg: format!("bad metadata: {e}") })?;
    meta.model.validate()?;
    let sections = r.u8()?;
    let mut found: [Option<ParamSet>; 4] = Default::default();
    for _ in 0..sections {
        let tag = r.u8()? as usize;
        if tag >= found.len() || found[tag].is_some() {
            return r.err(format!("unexpected section tag {tag}"));
        }
        found[tag] = Some(r.arrays(&meta.model)?);
    }
    if r.pos != bytes.len() {
        return r.err("trailing bytes after last section");
    }
    let [params, resume, accum, best] = found;
    let params = params.ok_or(Error::Binary { offset: r.pos, msg: "missing parameter section".into() })?;
    let resume = match (meta.progress, resume, accum, best) {
        (None, None, None, None) => None,
        (Some(pr), Some(cur), Some(accum), Some(best_params)) => Some(TrainState {
            params: cur,
            optimizer: AdaGradState { accum, lr: pr.lr, eps: pr.eps, steps: pr.steps },
            epochs_done: pr.epochs_done,
            best_params,
            best_metric: pr.best_metric,
            best_epoch: pr.best_epoch,
            epochs_since_best: pr.epochs_since_best,
            history: pr.history,
        }),
        _ => return r.err("incomplete training state"),
    };
    Ok(Checkpoint { params, train_config: meta.train_config, resume })
}

/// Write via a temporary sibling file so a crash never leaves a torn
/// checkpoint behind.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------- heatmaps

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

fn check_grid(grid: &[Vec<f64>]) -> Result<usize> {
    let cols = grid.first().map_or(0, Vec::len);
    if grid.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged heatmap grid".into()));
    }
    if grid.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("heatmap grid has non-finite values".into()));
    }
    Ok(cols)
}

/// One line per row, values comma-separated in shortest round-trip form.
pub fn heatmap_csv(grid: &[Vec<f64>]) -> Result<String> {
    check_grid(grid)?;
    let mut out = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_csv_grid(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            l.split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse { line: k + 1, msg: format!("{f:?}: {e}") }))
                .collect()
        })
        .collect()
}

/// Plain (P2) graymap, min-max scaled to 0..=255; a constant grid is 128.
pub fn heatmap_pgm(grid: &[Vec<f64>]) -> Result<String> {
    let cols = check_grid(grid)?;
    let (lo, hi) = grid.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut out = format!("P2\n{cols} {}\n255\n", grid.len());
    for row in grid {
        let px: Vec<String> = row
            .iter()
            .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 })
            .map(|p| p.to_string())
            .collect();
        out.push_str(&px.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_heatmap(grid: &[Vec<f64>], path: &Path, format: HeatmapFormat) -> Result<()> {
    let text = match format {
        HeatmapFormat::Csv => heatmap_csv(grid)?,
        HeatmapFormat::Pgm => heatmap_pgm(grid)?,
    };
    fs::write(path, text)?;
    Ok(())
}

/// Hidden dimension (0-based) with the largest `|score_W|` weight in the
/// first output row, looking only at the forward-scan half of a
/// bidirectional scorer. Ties go to the lowest index.
pub fn select_viz_dimension(params: &ParamSet) -> usize {
    let row = params.score_w.row(0);
    let mut best = 0;
    for (k, w) in row[..params.config.hidden_dim].iter().enumerate() {
        if w.abs() > row[best].abs() {
            best = k;
        }
    }
    best
}

/// Every gate value of every cell: `i,j,dim,z_i,z_l,z_t,z_d,r_l,r_t,r_d`.
pub fn gates_csv(state: &LatticeState) -> String {
    let mut out = String::from("i,j,dim,z_i,z_l,z_t,z_d,r_l,r_t,r_d\n");
    for i in 1..=state.m {
        for j in 1..=state.n {
            let z = state.z(i, j);
            let r = state.r(i, j);
            for k in 0..state.d {
                out.push_str(&format!(
                    "{i},{j},{k},{},{},{},{},{},{},{}\n",
                    z[0][k], z[1][k], z[2][k], z[3][k], r[0][k], r[1][k], r[2][k]
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{init_params, LossKind};
    use tempfile::tempdir;

    fn small_config() -> ModelConfig {
        ModelConfig { vocab_size: 7, embed_dim: 3, interaction_dim: 2, hidden_dim: 3, n_out: 1, bidirectional: true }
    }

    #[test]
    fn dataset_round_trip() {
        let header = DatasetHeader { vocab_size: 6, normalization: Some("lcs/max_len".into()), seed: Some(3), tokens: None };
        let data = vec![
            TrainInstance::Regression { s1: TokenSeq(vec![0, 1]), s2: TokenSeq(vec![5]), y: 0.1 + 0.2 },
            TrainInstance::Classification { s1: TokenSeq(vec![2]), s2: TokenSeq(vec![3, 3]), label: 1 },
            TrainInstance::Ranking { qid: 4, s1: TokenSeq(vec![1]), s2: TokenSeq(vec![2]), s2_neg: TokenSeq(vec![0]) },
        ];
        let text = dataset_to_string(&header, &data).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().contains("\"kind\":\"regression\""));
        let (h, d) = parse_dataset(&text, Some(6)).unwrap();
        assert_eq!((h, d), (header, data));
    }

    #[test]
    fn dataset_vocab_checks() {
        let header = DatasetHeader { vocab_size: 3, normalization: None, seed: None, tokens: None };
        let text = dataset_to_string(&header, &[TrainInstance::Regression { s1: TokenSeq(vec![2]), s2: TokenSeq(vec![0]), y: 1.0 }]).unwrap();
        assert!(matches!(parse_dataset(&text, Some(4)), Err(Error::Input(_))));
        let bad = text.replace("[2]", "[3]");
        assert!(matches!(parse_dataset(&bad, None), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_dataset("", None), Err(Error::Parse { line: 1, .. })));
        assert!(parse_dataset("{\"kind\":\"regression\"}", None).is_err());
    }

    #[test]
    fn vocab_encoding() {
        let v = Vocab::letters(10);
        assert_eq!(v.encode("ABCDE").unwrap().0, vec![0, 1, 2, 3, 4]);
        assert_eq!(v.encode("J A").unwrap().0, vec![9, 0]);
        let e = v.encode("AXZ").unwrap_err().to_string();
        assert!(e.contains("X Z"), "{e}");
        let w = Vocab::from_tokens(vec!["the".into(), "cat".into()]).unwrap();
        assert_eq!(w.encode("cat the cat").unwrap().0, vec![1, 0, 1]);
        assert!(Vocab::from_tokens(vec!["a".into(), "a".into()]).is_err());
    }

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn embeddings_load() {
        let dir = tempdir().unwrap();
        let vocab = Vocab::from_tokens(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let p = write(dir.path(), "full.txt", "3 2\na 1 2\nb 3 4\nc -1 0.5\n");
        let e = load_embeddings(&p, &vocab, 0.1, 0).unwrap();
        assert_eq!(e.matrix.data(), &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5]);
        assert_eq!((e.missing, e.unused), (0, 0));
        assert!(e.duplicates.is_empty());

        let p = write(dir.path(), "none.txt", "x 1 2 3\ny 4 5 6\n");
        let e = load_embeddings(&p, &vocab, 0.1, 0).unwrap();
        assert_eq!((e.missing, e.unused), (3, 2));
        assert_eq!(e.matrix.cols(), 3);
        assert!(e.matrix.data().iter().all(|v| v.abs() <= 0.1));
        assert_eq!(e.matrix, load_embeddings(&p, &vocab, 0.1, 0).unwrap().matrix);

        let p = write(dir.path(), "dup.txt", "a 1\nb 2\na 9\n");
        let e = load_embeddings(&p, &vocab, 0.1, 0).unwrap();
        assert_eq!(e.matrix.row(0), &[9.0]);
        assert_eq!(e.duplicates, vec!["a".to_string()]);
        assert_eq!(e.missing, 1);
    }

    #[test]
    fn embeddings_errors() {
        let dir = tempdir().unwrap();
        let vocab = Vocab::letters(2);
        let p = write(dir.path(), "bad.txt", "A 1 2\nB 1 zz\n");
        assert!(matches!(load_embeddings(&p, &vocab, 0.1, 0), Err(Error::Parse { line: 2, .. })));
        let p = write(dir.path(), "ragged.txt", "A 1 2\nB 1\n");
        assert!(matches!(load_embeddings(&p, &vocab, 0.1, 0), Err(Error::Input(_))));
        let p = write(dir.path(), "hdr.txt", "2 3\nA 1 2\nB 1 2\n");
        assert!(matches!(load_embeddings(&p, &vocab, 0.1, 0), Err(Error::Input(_))));
        let p = write(dir.path(), "count.txt", "5 2\nA 1 2\n");
        assert!(matches!(load_embeddings(&p, &vocab, 0.1, 0), Err(Error::Input(_))));
        assert!(matches!(load_embeddings(&dir.path().join("nope"), &vocab, 0.1, 0), Err(Error::Io(_))));
    }

    fn state_for(p: &ParamSet) -> TrainState {
        let cfg = TrainConfig { loss: LossKind::Square, ..TrainConfig::default() };
        let mut st = TrainState::new(p.clone(), &cfg);
        st.optimizer.accum.fill(0.25);
        st.optimizer.steps = 17;
        st.params.scale(1.5);
        st.epochs_done = 3;
        st.best_metric = Some(Metric { value: 0.1 + 0.2, higher_is_better: false });
        st.best_epoch = 2;
        st.epochs_since_best = 1;
        st.history.push(EpochRecord { epoch: 1, train_loss: 1.0 / 3.0, validation_metric: 0.3 });
        st
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let p = ParamSet::random(small_config(), 0.7, 11).unwrap();
        let plain = Checkpoint { params: p.clone(), train_config: None, resume: None };
        let back = decode_checkpoint(&encode_checkpoint(&plain).unwrap()).unwrap();
        assert!(back.params.bitwise_eq(&p));
        assert_eq!(back, plain);

        let full = Checkpoint { params: p.clone(), train_config: Some(TrainConfig::default()), resume: Some(state_for(&p)) };
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &full).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, full);
        let st = back.resume.unwrap();
        assert!(st.optimizer.accum.bitwise_eq(&full.resume.as_ref().unwrap().optimizer.accum));
        assert_eq!(st.best_metric.unwrap().value.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let p = ParamSet::random(small_config(), 0.7, 11).unwrap();
        let bytes = encode_checkpoint(&Checkpoint { params: p, train_config: None, resume: None }).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Binary { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bad), Err(Error::UnsupportedVersion { found: 7, expected: 1 })));

        for cut in [4, 15, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Binary { .. })), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }

    #[test]
    fn trained_params_round_trip() {
        let cfg = TrainConfig { embed_dim: 2, interaction_dim: 2, hidden_dim: 2, ..TrainConfig::default() };
        let p = init_params(&cfg, 5, None).unwrap();
        let ck = Checkpoint { params: p, train_config: Some(cfg), resume: None };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap(), ck);
    }

    #[test]
    fn pgm_scaling() {
        let pgm = heatmap_pgm(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(pgm, "P2\n2 2\n255\n0 255\n255 0\n");
        let pgm = heatmap_pgm(&vec![vec![3.5; 3]; 2]).unwrap();
        assert_eq!(pgm, "P2\n3 2\n255\n128 128 128\n128 128 128\n");
        assert!(heatmap_pgm(&[vec![0.0, f64::NAN]]).is_err());
        assert!(heatmap_pgm(&[vec![0.0, 1.0], vec![0.0]]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let grid = vec![vec![0.1 + 0.2, -1e-300, 12345.678], vec![std::f64::consts::PI, 0.0, -7.0]];
        let back = parse_csv_grid(&heatmap_csv(&grid).unwrap()).unwrap();
        for (a, b) in grid.iter().flatten().zip(back.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12);
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.csv");
        emit_heatmap(&grid, &path, HeatmapFormat::Csv).unwrap();
        assert_eq!(parse_csv_grid(&fs::read_to_string(&path).unwrap()).unwrap(), grid);
        assert!(matches!(parse_csv_grid("1,2\n3,x\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn viz_dimension() {
        let cfg = ModelConfig { vocab_size: 3, embed_dim: 2, interaction_dim: 2, hidden_dim: 3, n_out: 1, bidirectional: false };
        let mut p = ParamSet::zeros(cfg.clone()).unwrap();
        p.score_w.data_mut().copy_from_slice(&[0.1, -0.9, 0.3]);
        assert_eq!(select_viz_dimension(&p), 1);
        p.score_w.data_mut().copy_from_slice(&[0.5, 0.5, -0.5]);
        assert_eq!(select_viz_dimension(&p), 0);
        p.score_w.data_mut().copy_from_slice(&[0.0, 0.0, 1.0]);
        assert_eq!(select_viz_dimension(&p), 2);

        // backward half and second output row are ignored
        let bi = ModelConfig { bidirectional: true, n_out: 2, ..cfg };
        let mut p = ParamSet::zeros(bi).unwrap();
        p.score_w.data_mut().copy_from_slice(&[0.0, 0.2, 0.0, 9.0, 9.0, 9.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0]);
        assert_eq!(select_viz_dimension(&p), 1);
    }

    #[test]
    fn gate_dump() {
        let st = crate::model::exact_lcs_mode(&TokenSeq(vec![0, 1]), &TokenSeq(vec![1]));
        let csv = gates_csv(&st);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().nth(1).unwrap(), "1,1,0,0,0,1,0,1,1,1");
        assert_eq!(csv.lines().nth(2).unwrap(), "2,1,0,0.5,0,0,0.5,1,1,1");
    }
}
