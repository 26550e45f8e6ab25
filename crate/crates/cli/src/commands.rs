use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use matchsrnn::eval::{self, MetricRow};
use matchsrnn::grad::{fd_check, FdReport, Objective};
use matchsrnn::io::{self, Checkpoint, DatasetHeader, Vocab};
use matchsrnn::lcs::{self, DimSelect, MatchPath, SimPair};
use matchsrnn::oracle::dd::Dd;
use matchsrnn::oracle::reference::ReferenceObjective;
use matchsrnn::train::{self, LossKind, TrainConfig, TrainInstance, TrainState};
use matchsrnn::{exact_lcs_mode, forward, LatticeState, ModelConfig, ParamSet, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{PathDim, RunConfig};
use crate::manifest::RunManifest;
use crate::{Cli, CliError, Command, Task};

type CliResult<T> = Result<T, CliError>;

/// Per-run state: resolved config, output directory and the manifest.
pub struct Ctx {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub exact_mode: bool,
    /// `--dims` as given on the command line, if at all.
    pub dims_flag: Option<(usize, usize, usize)>,
    pub manifest: RunManifest,
    started: Instant,
}

impl Ctx {
    pub fn new(cli: &Cli, config: RunConfig, argv: Vec<String>) -> CliResult<Self> {
        let g = &cli.global;
        fs::create_dir_all(&g.out_dir)?;
        let mut manifest = RunManifest::new(cli.command.name(), argv, &config, g.exact_mode);
        manifest.inputs = match &cli.command {
            Command::Train { train, valid, resume, embeddings, vocab } => {
                [Some(train), valid.as_ref(), resume.as_ref(), embeddings.as_ref(), vocab.as_ref()].into_iter().flatten().cloned().collect()
            }
            Command::Eval { data, checkpoint, .. } => [Some(data), checkpoint.as_ref()].into_iter().flatten().cloned().collect(),
            Command::Visualize { checkpoint, vocab, .. } => [checkpoint.as_ref(), vocab.as_ref()].into_iter().flatten().cloned().collect(),
            _ => Vec::new(),
        };
        if let Some(c) = &g.config {
            manifest.inputs.insert(0, c.clone());
        }
        let ctx = Ctx { config, out_dir: g.out_dir.clone(), exact_mode: g.exact_mode, dims_flag: g.dims, manifest, started: Instant::now() };
        ctx.manifest.write(&ctx.out_dir)?;
        Ok(ctx)
    }

    /// A context without a command line, for library callers.
    pub fn detached(command: &str, config: RunConfig, out_dir: &Path, exact_mode: bool) -> CliResult<Self> {
        fs::create_dir_all(out_dir)?;
        let manifest = RunManifest::new(command, Vec::new(), &config, exact_mode);
        manifest.write(out_dir)?;
        Ok(Ctx { config, out_dir: out_dir.to_path_buf(), exact_mode, dims_flag: None, manifest, started: Instant::now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Write an artifact and record it in the manifest.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, contents)?;
        self.note_output(&p);
        Ok(p)
    }

    fn note_output(&mut self, p: &Path) {
        if !self.manifest.outputs.iter().any(|o| o == p) {
            self.manifest.outputs.push(p.to_path_buf());
        }
    }

    pub fn finish(&mut self, result: &CliResult<()>) -> CliResult<()> {
        self.manifest.status = match result {
            Ok(()) => "ok".into(),
            Err(e) => format!("error (exit {}): {e}", e.exit_code()),
        };
        self.manifest.wall_seconds = Some(self.started.elapsed().as_secs_f64());
        self.manifest.write(&self.out_dir)?;
        Ok(())
    }
}

pub fn dispatch(ctx: &mut Ctx, cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Gradcheck { instances, corrupt_grad } => {
            if let Some(n) = instances {
                ctx.config.gc_instances = *n;
            }
            cmd_gradcheck(ctx, *corrupt_grad).map(|_| ())
        }
        Command::SimulateLcs => cmd_simulate_lcs(ctx).map(|_| ()),
        Command::GenData { task } => cmd_gen_data(ctx, *task),
        Command::Train { train, valid, resume, embeddings, vocab } => {
            cmd_train(ctx, train, valid.as_deref(), resume.as_deref(), embeddings.as_deref(), vocab.as_deref()).map(|_| ())
        }
        Command::Eval { data, checkpoint, random } => cmd_eval(ctx, data, checkpoint.as_deref(), *random).map(|_| ()),
        Command::Visualize { s1, s2, checkpoint, vocab } => cmd_visualize(ctx, s1, s2, checkpoint.as_deref(), vocab.as_deref()),
    }
}

// --------------------------------------------------------------- gradcheck

/// One random gradient-check problem.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub params: ParamSet,
    pub data: Vec<TrainInstance>,
}

const GC_VOCAB: usize = 6;

fn rand_seq(rng: &mut ChaCha8Rng) -> TokenSeq {
    let len = rng.random_range(2..=6);
    TokenSeq((0..len).map(|_| rng.random_range(0..GC_VOCAB)).collect())
}

/// Instances cycle through the three losses. Each draws its own sizes
/// `d_e, c, d ∈ [2, 4]` and lengths `m, n ∈ [2, 6]`; the bidirectional
/// variant is drawn at random unless forced by the config.
pub fn gradcheck_cases(config: &RunConfig) -> CliResult<Vec<GradcheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let losses = [LossKind::Square, LossKind::Hinge, LossKind::CrossEntropy];
    (0..config.gc_instances)
        .map(|k| {
            let loss = losses[k % 3];
            let mc = ModelConfig {
                vocab_size: GC_VOCAB,
                embed_dim: rng.random_range(2..=4),
                interaction_dim: rng.random_range(2..=4),
                hidden_dim: rng.random_range(2..=4),
                n_out: loss.n_out(),
                bidirectional: config.train.bidirectional || rng.random_bool(0.5),
            };
            let params = ParamSet::random(mc, config.gc_init_scale, rng.random())?;
            let (s1, s2) = (rand_seq(&mut rng), rand_seq(&mut rng));
            let inst = match loss {
                LossKind::Square => TrainInstance::Regression { s1, s2, y: rng.random_range(0.0..1.0) },
                LossKind::Hinge => TrainInstance::Ranking { qid: k, s1, s2, s2_neg: rand_seq(&mut rng) },
                LossKind::CrossEntropy => TrainInstance::Classification { s1, s2, label: rng.random_range(0..2) },
            };
            Ok(GradcheckCase { params, data: vec![inst] })
        })
        .collect()
}

/// Analytic gradient deliberately off by 1e-3 in one scorer bias.
struct Corrupted<'a>(ReferenceObjective<'a>);

impl Objective for Corrupted<'_> {
    fn loss(&self, p: &ParamSet) -> matchsrnn::Result<Dd> {
        self.0.loss(p)
    }

    fn loss_and_grad(&self, p: &ParamSet) -> matchsrnn::Result<(f64, ParamSet)> {
        let (l, mut g) = self.0.loss_and_grad(p)?;
        g.score_b.as_mut_slice()[0] += 1e-3;
        Ok((l, g))
    }

    fn kink_pattern(&self, p: &ParamSet) -> matchsrnn::Result<Vec<bool>> {
        self.0.kink_pattern(p)
    }

    fn loss_and_kinks(&self, p: &ParamSet) -> matchsrnn::Result<(Dd, Vec<bool>)> {
        self.0.loss_and_kinks(p)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub instances: usize,
    pub eps: f64,
    pub tol: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub flagged: usize,
    pub passed: bool,
    /// `(array, max relative error)` in report order.
    pub arrays: Vec<(String, f64)>,
}

pub fn run_gradcheck(config: &RunConfig, corrupt: bool) -> CliResult<(FdReport, GradcheckSummary)> {
    if config.gc_instances == 0 {
        return Err(CliError::Input("gradcheck needs at least one instance".into()));
    }
    let mut report: Option<FdReport> = None;
    for case in gradcheck_cases(config)? {
        let obj = ReferenceObjective { instances: &case.data };
        let r = if corrupt {
            fd_check(&Corrupted(obj), &case.params, config.gc_eps, config.gc_max_per_array)?
        } else {
            fd_check(&obj, &case.params, config.gc_eps, config.gc_max_per_array)?
        };
        match &mut report {
            Some(acc) => acc.merge(r),
            None => report = Some(r),
        }
    }
    let report = report.expect("at least one instance");
    let summary = GradcheckSummary {
        instances: config.gc_instances,
        eps: config.gc_eps,
        tol: config.gc_tol,
        max_rel_error: report.max_rel_error(),
        checked: report.arrays.iter().map(|a| a.checked()).sum(),
        flagged: report.arrays.iter().map(|a| a.flagged()).sum(),
        passed: report.passes(config.gc_tol),
        arrays: report.arrays.iter().map(|a| (a.name.clone(), a.max_rel_error())).collect(),
    };
    Ok((report, summary))
}

pub fn cmd_gradcheck(ctx: &mut Ctx, corrupt: bool) -> CliResult<GradcheckSummary> {
    let (report, summary) = run_gradcheck(&ctx.config, corrupt)?;
    let text = format!(
        "{}\ninstances {}  eps {:e}  checked {}  flagged {}  max_rel_err {:.3e}  tol {:e}  {}\n",
        report.to_table(),
        summary.instances,
        summary.eps,
        summary.checked,
        summary.flagged,
        summary.max_rel_error,
        summary.tol,
        if summary.passed { "PASS" } else { "FAIL" }
    );
    print!("{text}");
    ctx.write("gradcheck.txt", &text)?;
    ctx.write("gradcheck.json", to_json(&summary)?)?;
    if !summary.passed {
        return Err(CliError::Numeric(format!("gradient check failed: max relative error {:.3e} > {:e}", summary.max_rel_error, summary.tol)));
    }
    Ok(summary)
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| CliError::Numeric(e.to_string()))
}

// ---------------------------------------------------------------- datasets

/// Generated train/valid/test splits for one synthetic task.
#[derive(Debug, Clone)]
pub struct Splits {
    pub header: DatasetHeader,
    pub train: Vec<TrainInstance>,
    pub valid: Vec<TrainInstance>,
    pub test: Vec<TrainInstance>,
}

/// Planted tasks draw the three splits from seeds `s`, `s + 100`, `s + 200`.
pub fn synthetic_splits(config: &RunConfig, task: Task) -> CliResult<Splits> {
    match task {
        Task::Lcs => {
            let (ds, valid) = lcs_data(config)?;
            let header = DatasetHeader {
                vocab_size: config.sim.alphabet,
                normalization: Some(lcs::NORMALIZATION.into()),
                seed: Some(config.sim.seed),
                tokens: Some(Vocab::letters(config.sim.alphabet).tokens().to_vec()),
            };
            let inst = |v: &[SimPair]| v.iter().map(SimPair::to_instance).collect();
            Ok(Splits { header, train: inst(&ds.train), valid: inst(&valid), test: inst(&ds.test) })
        }
        Task::Ranking | Task::Classification => {
            let p = &config.planted;
            let at = |off: u64| lcs::PlantedConfig { seed: p.seed.wrapping_add(off), ..p.clone() };
            let header = DatasetHeader {
                vocab_size: p.alphabet,
                normalization: None,
                seed: Some(p.seed),
                tokens: Some(Vocab::letters(p.alphabet).tokens().to_vec()),
            };
            let (train, valid, test) = if task == Task::Ranking {
                let n = config.rank_negatives;
                (
                    lcs::gen_ranking(&at(0), config.rank_queries, n)?,
                    lcs::gen_ranking(&at(100), config.rank_test_queries, n)?,
                    lcs::gen_ranking(&at(200), config.rank_test_queries, n)?,
                )
            } else {
                (
                    lcs::gen_classification(&at(0), config.class_pairs)?,
                    lcs::gen_classification(&at(100), config.class_test_pairs)?,
                    lcs::gen_classification(&at(200), config.class_test_pairs)?,
                )
            };
            Ok(Splits { header, train, valid, test })
        }
    }
}

/// The simulation dataset and a separately seeded validation set.
pub fn lcs_data(config: &RunConfig) -> CliResult<(lcs::SimDataset, Vec<SimPair>)> {
    let ds = lcs::gen_dataset(&config.sim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.sim.seed.wrapping_add(1));
    let valid = lcs::sim_pairs(&mut rng, &config.sim, config.n_valid);
    Ok((ds, valid))
}

pub fn cmd_gen_data(ctx: &mut Ctx, task: Task) -> CliResult<()> {
    let s = synthetic_splits(&ctx.config, task)?;
    for (name, data) in [("train.jsonl", &s.train), ("valid.jsonl", &s.valid), ("test.jsonl", &s.test)] {
        let text = io::dataset_to_string(&s.header, data)?;
        ctx.write(name, text)?;
    }
    println!("wrote {} / {} / {} instances to {}", s.train.len(), s.valid.len(), s.test.len(), ctx.out_dir.display());
    Ok(())
}

// ------------------------------------------------------------ simulate-lcs

#[derive(Debug, Clone, Serialize)]
pub struct ExampleReport {
    pub x: String,
    pub y: String,
    pub lcs: u32,
    pub prediction: f64,
    /// `round(prediction · max(m, n))`
    pub predicted_lcs: i64,
    pub viz_dim: usize,
    pub path_agreement: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactReport {
    pub pairs: usize,
    pub grid_matches: usize,
    pub diagonal_matches: usize,
    pub mean_path_agreement: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub n_train: usize,
    pub n_test: usize,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub pearson: Option<f64>,
    pub epochs: Option<usize>,
    pub best_epoch: Option<usize>,
    pub path_pairs: usize,
    pub path_agreement: f64,
    pub random_path_agreement: f64,
    pub example: Option<ExampleReport>,
    pub exact: Option<ExactReport>,
}

const EXAMPLE: (&str, &str) = ("ABCDE", "FACGD");

fn dim_select(config: &RunConfig, params: &ParamSet) -> DimSelect {
    match config.path_dim {
        PathDim::Viz => DimSelect::Dim(io::select_viz_dimension(params)),
        PathDim::Average => DimSelect::Average,
    }
}

/// Mean agreement of gate paths (from `lattice`) and DP paths over `pairs`,
/// plus the same statistic for uniformly random monotone paths.
pub fn path_statistics(
    pairs: &[SimPair],
    seed: u64,
    mut lattice: impl FnMut(&SimPair) -> CliResult<(LatticeState, DimSelect)>,
) -> CliResult<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut model, mut random) = (0.0, 0.0);
    for p in pairs {
        let dp = lcs::dp_backtrace(&lcs::lcs_table(&p.x, &p.y), &p.x, &p.y)?;
        let (st, sel) = lattice(p)?;
        model += lcs::path_agreement(&lcs::gate_backtrace(&st, sel)?, &dp)?;
        random += lcs::path_agreement(&lcs::random_monotone_path(p.x.len(), p.y.len(), &mut rng), &dp)?;
    }
    let n = pairs.len().max(1) as f64;
    Ok((model / n, random / n))
}

fn write_lattice_artifacts(ctx: &mut Ctx, dir: &str, st: &LatticeState, dim: usize, gate_path: &MatchPath) -> CliResult<()> {
    let grid = st.h_grid(dim);
    ctx.write(&format!("{dir}/heatmap.csv"), io::heatmap_csv(&grid)?)?;
    ctx.write(&format!("{dir}/heatmap.pgm"), io::heatmap_pgm(&grid)?)?;
    ctx.write(&format!("{dir}/gates.csv"), io::gates_csv(st))?;
    ctx.write(&format!("{dir}/path.csv"), gate_path.to_csv())?;
    Ok(())
}

fn write_dp_artifacts(ctx: &mut Ctx, dir: &str, x: &TokenSeq, y: &TokenSeq) -> CliResult<MatchPath> {
    let table = lcs::lcs_table(x, y);
    let grid: Vec<Vec<f64>> = table.rows().iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    ctx.write(&format!("{dir}/dp_table.csv"), io::heatmap_csv(&grid)?)?;
    let dp = lcs::dp_backtrace(&table, x, y)?;
    ctx.write(&format!("{dir}/dp_path.csv"), dp.to_csv())?;
    Ok(dp)
}

pub fn cmd_simulate_lcs(ctx: &mut Ctx) -> CliResult<SimReport> {
    let config = ctx.config.clone();
    if ctx.exact_mode {
        return simulate_exact(ctx, &config);
    }
    if config.train.loss != LossKind::Square {
        return Err(CliError::Input(format!("simulate-lcs trains with the square loss, not {}", config.train.loss.name())));
    }
    let (ds, valid) = lcs_data(&config)?;
    let train_set: Vec<TrainInstance> = ds.train.iter().map(SimPair::to_instance).collect();
    let valid_set: Vec<TrainInstance> = valid.iter().map(SimPair::to_instance).collect();
    let params = train::init_params(&config.train, config.sim.alphabet, None)?;
    let state = train_with_checkpoints(ctx, TrainState::new(params, &config.train), &train_set, &valid_set, &config.train)?;
    let best = &state.best_params;

    let mut preds = Vec::with_capacity(ds.test.len());
    let mut csv = String::from("x,y,lcs,label,prediction\n");
    let vocab = Vocab::letters(config.sim.alphabet);
    let spell = |s: &TokenSeq| s.ids().iter().map(|&i| vocab.token(i).unwrap_or("?")).collect::<String>();
    for p in &ds.test {
        let pred = train::predict(best, &p.x, &p.y)?.0[0];
        preds.push(pred);
        csv.push_str(&format!("{},{},{},{},{}\n", spell(&p.x), spell(&p.y), p.lcs, p.label, pred));
    }
    ctx.write("predictions.csv", csv)?;
    let labels: Vec<f64> = ds.test.iter().map(|p| p.label).collect();
    let stats = eval::regression_stats(&preds, &labels)?;

    let sel = dim_select(&config, best);
    let npaths = config.path_pairs.min(ds.test.len());
    let (agree, random) = path_statistics(&ds.test[..npaths], config.sim.seed.wrapping_add(3), |p| Ok((forward(&p.x, &p.y, best)?.fwd, sel)))?;

    let example = if config.sim.alphabet >= 7 {
        let (x, y) = (lcs::letters(EXAMPLE.0, config.sim.alphabet)?, lcs::letters(EXAMPLE.1, config.sim.alphabet)?);
        let pass = forward(&x, &y, best)?;
        let dim = io::select_viz_dimension(best);
        let gp = lcs::gate_backtrace(&pass.fwd, sel)?;
        write_lattice_artifacts(ctx, "example", &pass.fwd, dim, &gp)?;
        let dp = write_dp_artifacts(ctx, "example", &x, &y)?;
        let prediction = pass.output.0[0];
        Some(ExampleReport {
            x: EXAMPLE.0.into(),
            y: EXAMPLE.1.into(),
            lcs: lcs::lcs_table(&x, &y).length(),
            prediction,
            predicted_lcs: (prediction * x.len().max(y.len()) as f64).round() as i64,
            viz_dim: dim,
            path_agreement: lcs::path_agreement(&gp, &dp)?,
        })
    } else {
        None
    };

    let report = SimReport {
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        mse: Some(stats.mse),
        mae: Some(stats.mae),
        pearson: Some(stats.pearson),
        epochs: Some(state.epochs_done),
        best_epoch: Some(state.best_epoch),
        path_pairs: npaths,
        path_agreement: agree,
        random_path_agreement: random,
        example,
        exact: None,
    };
    finish_sim(ctx, &report)?;
    Ok(report)
}

fn simulate_exact(ctx: &mut Ctx, config: &RunConfig) -> CliResult<SimReport> {
    let ds = lcs::gen_dataset(&config.sim)?;
    let (mut grid_ok, mut diag_ok) = (0, 0);
    for p in &ds.test {
        let st = exact_lcs_mode(&p.x, &p.y);
        let table = lcs::lcs_table(&p.x, &p.y);
        let same = (0..=p.x.len()).all(|i| (0..=p.y.len()).all(|j| st.h(i, j)[0] == table.get(i, j) as f64));
        grid_ok += usize::from(same);
        let gp = lcs::gate_backtrace(&st, DimSelect::Dim(0))?;
        let dp = lcs::dp_backtrace(&table, &p.x, &p.y)?;
        diag_ok += usize::from(gp.diagonal_match_cells(&p.x, &p.y) == dp.diagonal_match_cells(&p.x, &p.y));
    }
    let (agree, random) = path_statistics(&ds.test, config.sim.seed.wrapping_add(3), |p| Ok((exact_lcs_mode(&p.x, &p.y), DimSelect::Dim(0))))?;

    let example = if config.sim.alphabet >= 7 {
        let (x, y) = (lcs::letters(EXAMPLE.0, config.sim.alphabet)?, lcs::letters(EXAMPLE.1, config.sim.alphabet)?);
        let st = exact_lcs_mode(&x, &y);
        let gp = lcs::gate_backtrace(&st, DimSelect::Dim(0))?;
        write_lattice_artifacts(ctx, "example", &st, 0, &gp)?;
        let dp = write_dp_artifacts(ctx, "example", &x, &y)?;
        let len = st.final_state()[0];
        Some(ExampleReport {
            x: EXAMPLE.0.into(),
            y: EXAMPLE.1.into(),
            lcs: lcs::lcs_table(&x, &y).length(),
            prediction: len / x.len().max(y.len()) as f64,
            predicted_lcs: len.round() as i64,
            viz_dim: 0,
            path_agreement: lcs::path_agreement(&gp, &dp)?,
        })
    } else {
        None
    };
    let exact = ExactReport { pairs: ds.test.len(), grid_matches: grid_ok, diagonal_matches: diag_ok, mean_path_agreement: agree };
    let report = SimReport {
        n_train: 0,
        n_test: ds.test.len(),
        mse: None,
        mae: None,
        pearson: None,
        epochs: None,
        best_epoch: None,
        path_pairs: ds.test.len(),
        path_agreement: agree,
        random_path_agreement: random,
        example,
        exact: Some(exact.clone()),
    };
    finish_sim(ctx, &report)?;
    if exact.grid_matches != exact.pairs || exact.diagonal_matches != exact.pairs {
        return Err(CliError::Numeric(format!(
            "exact lattice disagrees with DP: grids {}/{}, paths {}/{}",
            exact.grid_matches, exact.pairs, exact.diagonal_matches, exact.pairs
        )));
    }
    Ok(report)
}

fn finish_sim(ctx: &mut Ctx, r: &SimReport) -> CliResult<()> {
    ctx.write("metrics.json", to_json(r)?)?;
    let mut rows = Vec::new();
    let mut row = |metric: &str, value: f64, n: usize| rows.push(MetricRow { metric: metric.into(), value, n });
    if let (Some(mse), Some(mae), Some(r2)) = (r.mse, r.mae, r.pearson) {
        row("MSE", mse, r.n_test);
        row("MAE", mae, r.n_test);
        row("Pearson", r2, r.n_test);
    }
    if let Some(e) = &r.exact {
        row("GridEq", e.grid_matches as f64 / e.pairs as f64, e.pairs);
        row("DiagEq", e.diagonal_matches as f64 / e.pairs as f64, e.pairs);
    }
    row("PathAgr", r.path_agreement, r.path_pairs);
    row("RandAgr", r.random_path_agreement, r.path_pairs);
    let mut text = eval::report_text(&rows);
    if let Some(e) = &r.example {
        text.push_str(&format!(
            "example {}/{}: lcs {} predicted {:.4} -> {} (path agreement {:.3})\n",
            e.x, e.y, e.lcs, e.prediction, e.predicted_lcs, e.path_agreement
        ));
    }
    print!("{text}");
    ctx.write("metrics.txt", text)?;
    Ok(())
}

// ------------------------------------------------------------------- train

/// Train, writing `history.csv` and a resumable `model.ckpt` after every
/// epoch. On failure the history written so far stays on disk.
pub fn train_with_checkpoints(
    ctx: &mut Ctx,
    state: TrainState,
    train_set: &[TrainInstance],
    valid_set: &[TrainInstance],
    config: &TrainConfig,
) -> CliResult<TrainState> {
    let ckpt = ctx.path("model.ckpt");
    let hist = ctx.path("history.csv");
    ctx.note_output(&ckpt);
    ctx.note_output(&hist);
    let mut last = Instant::now();
    let mut walls = Vec::new();
    let state = train::train_from(state, train_set, valid_set, config, |s| {
        let rec = s.history.last().expect("epoch recorded");
        let secs = last.elapsed().as_secs_f64();
        walls.push((rec.epoch, secs));
        eprintln!(
            "epoch {:>3}  train_loss {:.6}  valid {:.6}  best@{}  {secs:.1}s",
            rec.epoch, rec.train_loss, rec.validation_metric, s.best_epoch
        );
        last = Instant::now();
        fs::write(&hist, train::history_csv(&s.history, &walls))?;
        io::save_checkpoint(&ckpt, &Checkpoint { params: s.best_params.clone(), train_config: Some(config.clone()), resume: Some(s.clone()) })
    });
    match state {
        Ok(s) => Ok(s),
        Err(e @ matchsrnn::Error::Numeric(_)) | Err(e @ matchsrnn::Error::NumericCell { .. }) => {
            Err(CliError::Numeric(format!("training diverged: {e} (history in {})", hist.display())))
        }
        Err(e) => Err(e.into()),
    }
}

/// Fields that must agree between a checkpoint and a run resuming it.
fn resume_compatible(saved: &TrainConfig, now: &TrainConfig) -> CliResult<()> {
    let same = (saved.embed_dim, saved.interaction_dim, saved.hidden_dim, saved.batch_size, saved.seed, saved.bidirectional, saved.loss, saved.freeze_embeddings)
        == (now.embed_dim, now.interaction_dim, now.hidden_dim, now.batch_size, now.seed, now.bidirectional, now.loss, now.freeze_embeddings)
        && saved.lr.to_bits() == now.lr.to_bits()
        && saved.adagrad_eps.to_bits() == now.adagrad_eps.to_bits();
    if same {
        Ok(())
    } else {
        Err(CliError::Input("checkpoint was trained with a different configuration (sizes, loss, batch, seed or optimizer)".into()))
    }
}

pub fn cmd_train(
    ctx: &mut Ctx,
    train_path: &Path,
    valid_path: Option<&Path>,
    resume: Option<&Path>,
    embeddings: Option<&Path>,
    vocab_path: Option<&Path>,
) -> CliResult<TrainState> {
    let config = ctx.config.train.clone();
    let (header, train_set) = io::read_dataset(train_path, None)?;
    let valid_set = match valid_path {
        Some(p) => io::read_dataset(p, Some(header.vocab_size))?.1,
        None => Vec::new(),
    };
    train::check_data(&train_set, &config, header.vocab_size)?;
    train::check_data(&valid_set, &config, header.vocab_size)?;

    let state = match resume {
        Some(p) => {
            let ck = io::load_checkpoint(p)?;
            let saved = ck.train_config.ok_or_else(|| CliError::Input("checkpoint has no training configuration".into()))?;
            resume_compatible(&saved, &config)?;
            let st = ck.resume.ok_or_else(|| CliError::Input("checkpoint has no training state to resume".into()))?;
            if st.params.config.vocab_size != header.vocab_size {
                return Err(CliError::Input("checkpoint vocabulary differs from the dataset's".into()));
            }
            st
        }
        None => {
            let emb = match embeddings {
                Some(path) => {
                    let vocab = match (vocab_path, &header.tokens) {
                        (Some(v), _) => io::load_vocab(v)?,
                        (None, Some(t)) => Vocab::from_tokens(t.clone())?,
                        (None, None) => return Err(CliError::Input("--embeddings needs --vocab or a dataset header with tokens".into())),
                    };
                    if vocab.len() != header.vocab_size {
                        return Err(CliError::Input(format!("vocabulary has {} tokens, dataset expects {}", vocab.len(), header.vocab_size)));
                    }
                    let loaded = io::load_embeddings(path, &vocab, config.init_scale, config.seed)?;
                    if loaded.missing > 0 {
                        eprintln!("warning: {} of {} tokens have no pre-trained vector; initialized randomly", loaded.missing, vocab.len());
                    }
                    for t in &loaded.duplicates {
                        eprintln!("warning: token {t:?} appears more than once in {}; last vector kept", path.display());
                    }
                    Some(loaded.matrix)
                }
                None => None,
            };
            TrainState::new(train::init_params(&config, header.vocab_size, emb.as_ref())?, &config)
        }
    };
    let state = train_with_checkpoints(ctx, state, &train_set, &valid_set, &config)?;
    println!(
        "trained {} epochs; best validation metric {:.6} at epoch {}",
        state.epochs_done,
        state.best_metric.map_or(f64::NAN, |m| m.value),
        state.best_epoch
    );
    Ok(state)
}

// -------------------------------------------------------------------- eval

/// Metric rows for a dataset: MSE/MAE/Pearson for regression, P@1/MRR for
/// ranking, Acc for classification.
pub fn evaluate_rows(params: &ParamSet, data: &[TrainInstance]) -> CliResult<Vec<MetricRow>> {
    let first = data.first().ok_or_else(|| CliError::Input("empty dataset".into()))?;
    let kind = first.loss_kind();
    if data.iter().any(|i| i.loss_kind() != kind) {
        return Err(CliError::Input("dataset mixes instance kinds".into()));
    }
    if params.config.n_out != kind.n_out() {
        return Err(CliError::Input(format!(
            "model has {} outputs but {} data needs {}",
            params.config.n_out,
            kind.name(),
            kind.n_out()
        )));
    }
    let row = |metric: &str, value: f64, n: usize| MetricRow { metric: metric.into(), value, n };
    Ok(match kind {
        LossKind::Square => {
            let mut preds = Vec::new();
            let mut ys = Vec::new();
            for inst in data {
                if let TrainInstance::Regression { s1, s2, y } = inst {
                    preds.push(train::predict(params, s1, s2)?.0[0]);
                    ys.push(*y);
                }
            }
            let s = eval::regression_stats(&preds, &ys)?;
            vec![row("MSE", s.mse, s.n), row("MAE", s.mae, s.n), row("Pearson", s.pearson, s.n)]
        }
        LossKind::Hinge => {
            let lists = train::ranking_lists(params, data)?;
            vec![row("P@1", eval::p_at_1(&lists)?, lists.len()), row("MRR", eval::mrr(&lists)?, lists.len())]
        }
        LossKind::CrossEntropy => {
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for inst in data {
                if let TrainInstance::Classification { s1, s2, label } = inst {
                    let o = train::predict(params, s1, s2)?;
                    preds.push(u8::from(o.0[1] > o.0[0]));
                    labels.push(*label);
                }
            }
            vec![row("Acc", eval::accuracy(&preds, &labels)?, preds.len())]
        }
    })
}

pub fn cmd_eval(ctx: &mut Ctx, data: &Path, checkpoint: Option<&Path>, random: bool) -> CliResult<Vec<MetricRow>> {
    let (header, set) = io::read_dataset(data, None)?;
    let kind = set.first().ok_or_else(|| CliError::Input("empty dataset".into()))?.loss_kind();
    let params = match (checkpoint, random) {
        (Some(p), false) => {
            let ck = io::load_checkpoint(p)?;
            let mc = &ck.params.config;
            if let Some(d) = ctx.dims_flag {
                if d != (mc.embed_dim, mc.interaction_dim, mc.hidden_dim) {
                    return Err(CliError::Input(format!(
                        "--dims {},{},{} does not match the checkpoint's {},{},{}",
                        d.0, d.1, d.2, mc.embed_dim, mc.interaction_dim, mc.hidden_dim
                    )));
                }
            }
            if mc.vocab_size != header.vocab_size {
                return Err(CliError::Input(format!("checkpoint vocabulary {} does not match dataset vocabulary {}", mc.vocab_size, header.vocab_size)));
            }
            ck.params
        }
        (None, true) => {
            let cfg = TrainConfig { loss: kind, ..ctx.config.train.clone() };
            train::init_params(&cfg, header.vocab_size, None)?
        }
        _ => return Err(CliError::Input("eval needs exactly one of --checkpoint or --random".into())),
    };
    let rows = evaluate_rows(&params, &set)?;
    let text = eval::report_text(&rows);
    print!("{text}");
    ctx.write("metrics.txt", text)?;
    ctx.write("metrics.csv", eval::report_csv(&rows))?;
    Ok(rows)
}

// --------------------------------------------------------------- visualize

pub fn cmd_visualize(ctx: &mut Ctx, s1: &str, s2: &str, checkpoint: Option<&Path>, vocab_path: Option<&Path>) -> CliResult<()> {
    let params = match (ctx.exact_mode, checkpoint) {
        (true, _) => None,
        (false, Some(p)) => Some(io::load_checkpoint(p)?.params),
        (false, None) => return Err(CliError::Input("visualize needs --checkpoint or --exact-mode".into())),
    };
    let vocab = match (vocab_path, &params) {
        (Some(v), _) => io::load_vocab(v)?,
        (None, Some(p)) => Vocab::letters(p.config.vocab_size),
        (None, None) => Vocab::letters(26),
    };
    if let Some(p) = &params {
        if vocab.len() != p.config.vocab_size {
            return Err(CliError::Input(format!("vocabulary has {} tokens, checkpoint expects {}", vocab.len(), p.config.vocab_size)));
        }
    }
    let (x, y) = (vocab.encode(s1)?, vocab.encode(s2)?);
    if x.is_empty() || y.is_empty() {
        return Err(CliError::Input("both texts must be non-empty".into()));
    }
    let (st, dim, sel) = match &params {
        None => (exact_lcs_mode(&x, &y), 0, DimSelect::Dim(0)),
        Some(p) => (forward(&x, &y, p)?.fwd, io::select_viz_dimension(p), dim_select(&ctx.config, p)),
    };
    let gp = lcs::gate_backtrace(&st, sel)?;
    let grid = st.h_grid(dim);
    ctx.write("heatmap.csv", io::heatmap_csv(&grid)?)?;
    ctx.write("heatmap.pgm", io::heatmap_pgm(&grid)?)?;
    ctx.write("gates.csv", io::gates_csv(&st))?;
    ctx.write("path.csv", gp.to_csv())?;
    println!("dimension {dim}; path of {} steps written to {}", gp.moves.len(), ctx.out_dir.display());
    Ok(())
}
