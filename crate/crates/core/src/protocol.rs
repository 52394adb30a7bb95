//! The experimental object: train on one magnification, test on all four.
//! Produces 4x4 accuracy matrices with per-cell provenance, aggregate
//! statistics, and cross-architecture rankings. Runs persist per-seed records
//! and checkpoints, so an interrupted matrix resumes instead of retraining.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, save_model};
use crate::data::{resize_dataset, split, MagDataset, Mag, SplitSpec};
use crate::defaults;
use crate::error::{Error, Result};
use crate::models::{Family, Model, ModelConfig, ModelProfile};
use crate::train::{
    evaluate, load_run_record, pick_best, save_run_record, train, write_history_csv, EvalResult,
    RunRecord, TrainConfig,
};

/// What to run a matrix for: a real family, or the label-reading oracle that
/// exercises the full pipeline with a known all-ones answer.
#[derive(Clone, Debug, PartialEq)]
pub enum ArchSpec {
    Real(ModelConfig),
    Oracle,
}

impl ArchSpec {
    pub fn name(&self) -> String {
        match self {
            ArchSpec::Real(cfg) => cfg.family.name().to_string(),
            ArchSpec::Oracle => "Oracle".to_string(),
        }
    }

    /// Family name (desk defaults) or "oracle".
    pub fn from_name(name: &str) -> Result<ArchSpec> {
        if name.eq_ignore_ascii_case("oracle") {
            return Ok(ArchSpec::Oracle);
        }
        let family: Family = name.parse()?;
        Ok(ArchSpec::Real(ModelConfig::desk(family)))
    }
}

#[derive(Clone, Debug)]
pub struct MatrixConfig {
    pub train: TrainConfig,
    /// Seeds for best-of-k per row.
    pub run_seeds: Vec<u64>,
    pub split_seed: u64,
    /// When set, rows persist under `<out_dir>/<arch>/<mag>/run_<seed>/` and
    /// finished runs are reused on the next invocation.
    pub out_dir: Option<PathBuf>,
    /// Upper bound on concurrently trained rows. Row results are merged in
    /// fixed magnification order, so the schedule never changes the output.
    pub jobs: usize,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            train: TrainConfig::default(),
            run_seeds: (1..=defaults::RUNS as u64).collect(),
            split_seed: 0,
            out_dir: None,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RowInfo {
    pub train_mag: String,
    pub winning_seed: u64,
    /// None for the oracle, which trains nothing.
    pub record: Option<RunRecord>,
    /// Run directories relative to the matrix file, oldest seed first.
    pub run_dirs: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossMagMatrix {
    pub arch: String,
    pub dataset_fingerprint: String,
    pub split_seed: u64,
    pub run_seeds: Vec<u64>,
    pub profile: ModelProfile,
    /// cells[i][j] = accuracy trained on mag i, tested on mag j, in the fixed
    /// order [40X, 100X, 200X, 400X]. None marks a failed cell.
    pub cells: [[Option<f64>; 4]; 4],
    pub rows: Vec<Option<RowInfo>>,
}

impl CrossMagMatrix {
    pub fn missing(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_none()).count()
    }
}

pub struct MatrixOutcome {
    pub matrix: CrossMagMatrix,
    /// (context, error) per failed row or cell; empty on full success.
    pub failures: Vec<(String, Error)>,
}

pub fn run_matrix(arch: &ArchSpec, dataset: &MagDataset, cfg: &MatrixConfig) -> Result<MatrixOutcome> {
    cfg.train.validate()?;
    if cfg.run_seeds.is_empty() {
        return Err(Error::Empty { what: "run seed list".into() });
    }
    if cfg.jobs == 0 {
        return Err(Error::config("jobs", "must be >= 1"));
    }
    for mag in Mag::ALL {
        if !dataset.items.iter().any(|it| it.mag == mag) {
            return Err(Error::config(
                "dataset",
                format!("no items at {}; the protocol needs all four magnifications", mag.label()),
            ));
        }
    }
    let fingerprint = dataset.fingerprint();

    // Fixed-resolution families always see their trained size; flexible
    // families take the data at its native size.
    let working;
    let ds = match arch {
        ArchSpec::Real(mc) if mc.family.fixed_resolution() && dataset.image_size != mc.input_size => {
            working = resize_dataset(dataset, mc.input_size.0, mc.input_size.1)?;
            &working
        }
        _ => dataset,
    };
    let (train_all, val_all, test_all) = split(ds, SplitSpec { seed: cfg.split_seed })?;

    let profile = match arch {
        ArchSpec::Real(mc) => Model::build(mc.clone(), cfg.run_seeds[0])?.profile()?,
        ArchSpec::Oracle => ModelProfile { param_count: 0, activation_elems: 0, mult_adds: 0 },
    };
    let arch_name = arch.name();
    let mut matrix = CrossMagMatrix {
        arch: arch_name.clone(),
        dataset_fingerprint: fingerprint.clone(),
        split_seed: cfg.split_seed,
        run_seeds: cfg.run_seeds.clone(),
        profile,
        cells: [[None; 4]; 4],
        rows: vec![None, None, None, None],
    };
    let mut failures: Vec<(String, Error)> = Vec::new();

    let tests: Vec<MagDataset> = Mag::ALL.iter().map(|&m| test_all.filter_mag(m)).collect();
    match arch {
        ArchSpec::Oracle => {
            for (i, train_mag) in Mag::ALL.into_iter().enumerate() {
                for (j, test) in tests.iter().enumerate() {
                    match oracle_eval(test) {
                        Ok(r) => matrix.cells[i][j] = Some(r.top1),
                        Err(e) => failures.push((cell_tag(&arch_name, i, j), e)),
                    }
                }
                matrix.rows[i] = Some(RowInfo {
                    train_mag: train_mag.label().to_string(),
                    winning_seed: 0,
                    record: None,
                    run_dirs: Vec::new(),
                });
            }
        }
        ArchSpec::Real(mc) => {
            let workers = cfg.jobs.min(4);
            let outputs: Vec<RowOutput> = if workers == 1 {
                (0..4)
                    .map(|i| real_row(mc, &arch_name, i, &train_all, &val_all, &tests, cfg, &fingerprint))
                    .collect()
            } else {
                // Rows are self-contained seeded jobs; a work-stealing index
                // hands each to one thread and slots keep row order.
                let slots: Vec<Mutex<Option<RowOutput>>> = (0..4).map(|_| Mutex::new(None)).collect();
                let next = AtomicUsize::new(0);
                std::thread::scope(|s| {
                    for _ in 0..workers {
                        s.spawn(|| loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= 4 {
                                break;
                            }
                            let out =
                                real_row(mc, &arch_name, i, &train_all, &val_all, &tests, cfg, &fingerprint);
                            *slots[i].lock().unwrap() = Some(out);
                        });
                    }
                });
                slots.into_iter().map(|m| m.into_inner().unwrap().expect("every row lands")).collect()
            };
            for (i, out) in outputs.into_iter().enumerate() {
                matrix.cells[i] = out.cells;
                matrix.rows[i] = out.row;
                failures.extend(out.failures);
            }
        }
    }

    if let Some(out) = &cfg.out_dir {
        let dir = out.join(&arch_name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        save_matrix(dir.join("matrix.json"), &matrix)?;
    }
    Ok(MatrixOutcome { matrix, failures })
}

fn cell_tag(arch: &str, i: usize, j: usize) -> String {
    format!("{arch} cell {}->{}", Mag::ALL[i].label(), Mag::ALL[j].label())
}

struct RowOutput {
    row: Option<RowInfo>,
    cells: [Option<f64>; 4],
    failures: Vec<(String, Error)>,
}

/// One complete row: best-of-k training at one magnification, then the
/// winner evaluated on every test magnification. Never panics on cell
/// failure; the row reports what it could fill.
#[allow(clippy::too_many_arguments)]
fn real_row(
    mc: &ModelConfig,
    arch_name: &str,
    i: usize,
    train_all: &MagDataset,
    val_all: &MagDataset,
    tests: &[MagDataset],
    cfg: &MatrixConfig,
    fingerprint: &str,
) -> RowOutput {
    let train_mag = Mag::ALL[i];
    let mut out = RowOutput { row: None, cells: [None; 4], failures: Vec::new() };
    match run_row(mc, arch_name, train_mag, train_all, val_all, &tests[i], cfg, fingerprint) {
        Ok((mut model, info)) => {
            for (j, test) in tests.iter().enumerate() {
                if i == j {
                    // Definitional: the diagonal is the winning run's own
                    // test evaluation.
                    out.cells[j] = info
                        .record
                        .as_ref()
                        .and_then(|r| r.final_test.as_ref())
                        .map(|t| t.top1);
                    continue;
                }
                match evaluate(&mut model, test, cfg.train.batch_size) {
                    Ok(r) => out.cells[j] = Some(r.top1),
                    Err(e) => out.failures.push((cell_tag(arch_name, i, j), e)),
                }
            }
            out.row = Some(info);
        }
        Err(e) => out.failures.push((
            format!("{arch_name} row {}", train_mag.label()),
            Error::Cell {
                arch: arch_name.to_string(),
                train_mag: train_mag.label().to_string(),
                source: Box::new(e),
            },
        )),
    }
    out
}

/// Best-of-k for one row, reusing any persisted run whose record matches the
/// current dataset, seed, and architecture.
#[allow(clippy::too_many_arguments)]
fn run_row(
    mc: &ModelConfig,
    arch_name: &str,
    train_mag: Mag,
    train_all: &MagDataset,
    val_all: &MagDataset,
    diag_test: &MagDataset,
    cfg: &MatrixConfig,
    fingerprint: &str,
) -> Result<(Model, RowInfo)> {
    let tr = train_all.filter_mag(train_mag);
    let va = val_all.filter_mag(train_mag);
    if tr.is_empty() {
        return Err(Error::Empty { what: format!("training split at {}", train_mag.label()) });
    }

    let mut models = Vec::new();
    let mut records = Vec::new();
    let mut run_dirs = Vec::new();
    for &seed in &cfg.run_seeds {
        let run_dir = cfg
            .out_dir
            .as_ref()
            .map(|o| o.join(arch_name).join(train_mag.label()).join(format!("run_{seed}")));
        if let Some(dir) = &run_dir {
            run_dirs.push(format!("{}/run_{seed}", train_mag.label()));
            if let Some(hit) = try_resume(dir, mc, seed, fingerprint) {
                log::info!("{arch_name}/{}: reusing run_{seed}", train_mag.label());
                models.push(hit.0);
                records.push(hit.1);
                continue;
            }
        }

        let mut run_cfg = cfg.train.clone();
        run_cfg.seed = seed;
        let model = Model::build(mc.clone(), seed)?;
        let (mut model, mut record) = train(model, &tr, &va, &run_cfg)?;
        record.final_test = Some(evaluate(&mut model, diag_test, run_cfg.batch_size)?);
        record.dataset_fingerprint = Some(fingerprint.to_string());
        if let Some(dir) = &run_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let ckpt = dir.join("model.ckpt");
            save_model(&ckpt, &model)?;
            record.checkpoint_path =
                Some(format!("{}/run_{seed}/model.ckpt", train_mag.label()));
            save_run_record(dir.join("record.json"), &record)?;
            write_history_csv(dir.join("history.csv"), &record.history)?;
        }
        models.push(model);
        records.push(record);
    }

    let best = pick_best(&records).expect("nonempty seed list");
    let info = RowInfo {
        train_mag: train_mag.label().to_string(),
        winning_seed: records[best].seed,
        record: Some(records[best].clone()),
        run_dirs,
    };
    Ok((models.swap_remove(best), info))
}

fn try_resume(dir: &Path, mc: &ModelConfig, seed: u64, fingerprint: &str) -> Option<(Model, RunRecord)> {
    let record = load_run_record(dir.join("record.json")).ok()?;
    if record.seed != seed
        || record.model != *mc
        || record.dataset_fingerprint.as_deref() != Some(fingerprint)
        || record.final_test.is_none()
    {
        return None;
    }
    let model = load_model(dir.join("model.ckpt")).ok()?;
    if model.config != *mc {
        return None;
    }
    Some((model, record))
}

/// Predicts every label correctly through the real counting path.
fn oracle_eval(test: &MagDataset) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Empty { what: "evaluation set".into() });
    }
    let classes = test.class_names.len();
    let mut per_class = vec![(0usize, 0usize); classes];
    for it in &test.items {
        per_class[it.class_id].0 += 1;
        per_class[it.class_id].1 += 1;
    }
    Ok(EvalResult { top1: 1.0, per_class })
}

pub fn save_matrix(path: impl AsRef<Path>, matrix: &CrossMagMatrix) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(matrix)
        .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<CrossMagMatrix> {
    let path = path.as_ref();
    let raw =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&raw).map_err(|e| Error::Json { path: path.display().to_string(), source: e })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchSummary {
    pub arch: String,
    pub dataset_fingerprint: String,
    pub row_means: [f64; 4],
    pub overall_mean: f64,
    pub diagonal_mean: f64,
    pub min_cell: f64,
    pub min_offdiag_cell: f64,
    pub param_count: usize,
    pub activation_elems: usize,
}

pub fn summarize(matrix: &CrossMagMatrix) -> Result<ArchSummary> {
    let missing = matrix.missing();
    if missing > 0 {
        return Err(Error::IncompleteMatrix { arch: matrix.arch.clone(), missing });
    }
    let cell = |i: usize, j: usize| matrix.cells[i][j].unwrap();
    let mut row_means = [0.0; 4];
    for i in 0..4 {
        row_means[i] = (0..4).map(|j| cell(i, j)).sum::<f64>() / 4.0;
    }
    let overall_mean = row_means.iter().sum::<f64>() / 4.0;
    let diagonal_mean = (0..4).map(|i| cell(i, i)).sum::<f64>() / 4.0;
    let mut min_cell = f64::INFINITY;
    let mut min_offdiag = f64::INFINITY;
    for i in 0..4 {
        for j in 0..4 {
            min_cell = min_cell.min(cell(i, j));
            if i != j {
                min_offdiag = min_offdiag.min(cell(i, j));
            }
        }
    }
    Ok(ArchSummary {
        arch: matrix.arch.clone(),
        dataset_fingerprint: matrix.dataset_fingerprint.clone(),
        row_means,
        overall_mean,
        diagonal_mean,
        min_cell,
        min_offdiag_cell: min_offdiag,
        param_count: matrix.profile.param_count,
        activation_elems: matrix.profile.activation_elems,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankEntry {
    pub arch: String,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub dataset_fingerprint: String,
    /// Mean over all 16 cells, best first.
    pub by_overall_mean: Vec<RankEntry>,
    /// Same-magnification mean, best first.
    pub by_diagonal_mean: Vec<RankEntry>,
    /// Worst single cell, best first (stability).
    pub by_min_cell: Vec<RankEntry>,
    /// diagonal mean minus off-diagonal mean, per architecture.
    pub generalization_gaps: Vec<RankEntry>,
    /// Observed-vs-expected agreement lines; informational only.
    pub expectation_notes: Vec<String>,
}

pub fn compare(summaries: &[ArchSummary]) -> Result<RobustnessReport> {
    if summaries.is_empty() {
        return Err(Error::Empty { what: "summary list".into() });
    }
    let fp = &summaries[0].dataset_fingerprint;
    for s in summaries {
        if &s.dataset_fingerprint != fp {
            return Err(Error::SnapshotMismatch {
                a: format!("{} on {}", summaries[0].arch, short(fp)),
                b: format!("{} on {}", s.arch, short(&s.dataset_fingerprint)),
            });
        }
    }
    let ranking = |key: fn(&ArchSummary) -> f64| -> Vec<RankEntry> {
        let mut v: Vec<RankEntry> =
            summaries.iter().map(|s| RankEntry { arch: s.arch.clone(), value: key(s) }).collect();
        v.sort_by(|a, b| {
            b.value.partial_cmp(&a.value).unwrap().then_with(|| a.arch.cmp(&b.arch))
        });
        v
    };
    let by_overall_mean = ranking(|s| s.overall_mean);
    let by_diagonal_mean = ranking(|s| s.diagonal_mean);
    let by_min_cell = ranking(|s| s.min_cell);
    let generalization_gaps = ranking(|s| {
        let offdiag_mean = (16.0 * s.overall_mean - 4.0 * s.diagonal_mean) / 12.0;
        s.diagonal_mean - offdiag_mean
    });

    let mut expectation_notes = Vec::new();
    let expect = &defaults::REFERENCE_EXPECTATIONS;
    for (label, expected, observed) in [
        ("overall mean", expect.best_overall_mean, &by_overall_mean),
        ("diagonal mean", expect.best_diagonal_mean, &by_diagonal_mean),
        ("worst cell", expect.best_min_cell, &by_min_cell),
    ] {
        let leader = &observed[0].arch;
        if summaries.iter().any(|s| s.arch == expected) {
            let verdict = if leader == expected { "agrees with" } else { "differs from" };
            expectation_notes.push(format!(
                "{label} leader: {leader} ({verdict} the reference expectation {expected})"
            ));
        } else {
            expectation_notes.push(format!("{label} leader: {leader}"));
        }
    }

    Ok(RobustnessReport {
        dataset_fingerprint: fp.clone(),
        by_overall_mean,
        by_diagonal_mean,
        by_min_cell,
        generalization_gaps,
        expectation_notes,
    })
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(super) fn mock_matrix(arch: &str, cells: [[f64; 4]; 4]) -> CrossMagMatrix {
        CrossMagMatrix {
            arch: arch.to_string(),
            dataset_fingerprint: "fp".to_string(),
            split_seed: 0,
            run_seeds: vec![1],
            profile: ModelProfile { param_count: 10, activation_elems: 20, mult_adds: 30 },
            cells: cells.map(|row| row.map(Some)),
            rows: vec![None, None, None, None],
        }
    }

    #[test]
    fn constant_matrix_gives_constant_statistics() {
        let s = summarize(&mock_matrix("A", [[0.9; 4]; 4])).unwrap();
        assert_eq!(s.row_means, [0.9; 4]);
        assert_eq!(s.overall_mean, 0.9);
        assert_eq!(s.diagonal_mean, 0.9);
        assert_eq!(s.min_cell, 0.9);
        assert_eq!(s.min_offdiag_cell, 0.9);
        assert_eq!((s.param_count, s.activation_elems), (10, 20));
    }

    #[test]
    fn diagonal_one_offdiagonal_half_arithmetic() {
        let mut cells = [[0.5; 4]; 4];
        for i in 0..4 {
            cells[i][i] = 1.0;
        }
        let s = summarize(&mock_matrix("A", cells)).unwrap();
        assert_eq!(s.diagonal_mean, 1.0);
        assert!((s.overall_mean - 0.625).abs() < 1e-12);
        assert_eq!(s.min_offdiag_cell, 0.5);
        assert_eq!(s.min_cell, 0.5);
    }

    #[test]
    fn min_cell_catches_the_single_worst_entry() {
        let mut cells = [[0.95; 4]; 4];
        cells[2][0] = 0.87;
        let s = summarize(&mock_matrix("A", cells)).unwrap();
        assert_eq!(s.min_cell, 0.87);
        assert_eq!(s.min_offdiag_cell, 0.87);
    }

    #[test]
    fn incomplete_matrix_is_refused_with_missing_count() {
        let mut m = mock_matrix("A", [[0.9; 4]; 4]);
        m.cells[1][2] = None;
        m.cells[3][0] = None;
        match summarize(&m) {
            Err(Error::IncompleteMatrix { arch, missing }) => {
                assert_eq!(arch, "A");
                assert_eq!(missing, 2);
            }
            other => panic!("expected incomplete-matrix error, got {other:?}"),
        }
    }

    #[test]
    fn summary_is_invariant_under_joint_permutation() {
        let cells = [
            [0.91, 0.62, 0.55, 0.43],
            [0.72, 0.93, 0.81, 0.66],
            [0.58, 0.84, 0.95, 0.79],
            [0.41, 0.63, 0.82, 0.97],
        ];
        let s = summarize(&mock_matrix("A", cells)).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                permuted[i][j] = cells[perm[i]][perm[j]];
            }
        }
        let p = summarize(&mock_matrix("A", permuted)).unwrap();
        assert!((s.overall_mean - p.overall_mean).abs() < 1e-12);
        assert!((s.diagonal_mean - p.diagonal_mean).abs() < 1e-12);
        assert_eq!(s.min_cell, p.min_cell);
        assert_eq!(s.min_offdiag_cell, p.min_offdiag_cell);
        for i in 0..4 {
            assert!((p.row_means[i] - s.row_means[perm[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn statistic_ordering_chain_holds() {
        let cells = [
            [0.91, 0.62, 0.55, 0.43],
            [0.72, 0.93, 0.81, 0.66],
            [0.58, 0.84, 0.95, 0.79],
            [0.41, 0.63, 0.82, 0.97],
        ];
        let s = summarize(&mock_matrix("A", cells)).unwrap();
        let row_min = s.row_means.iter().cloned().fold(f64::INFINITY, f64::min);
        let row_max = s.row_means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(s.min_cell <= row_min);
        assert!(row_min <= s.overall_mean);
        assert!(s.overall_mean <= row_max);
    }

    #[test]
    fn compare_ranks_and_notes() {
        let a = summarize(&mock_matrix("Alpha", [[0.9; 4]; 4])).unwrap();
        let b = summarize(&mock_matrix("Beta", [[0.8; 4]; 4])).unwrap();
        let single = compare(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.by_overall_mean.len(), 1);

        let rep = compare(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(rep.by_overall_mean[0].arch, "Alpha");
        assert_eq!(rep.by_overall_mean[1].arch, "Beta");
        assert_eq!(rep.expectation_notes.len(), 3);

        // X leads same-magnification while Y leads stability.
        let mut xc = [[0.6; 4]; 4];
        for i in 0..4 {
            xc[i][i] = 0.99;
        }
        xc[0][3] = 0.4;
        let mut yc = [[0.8; 4]; 4];
        for i in 0..4 {
            yc[i][i] = 0.9;
        }
        let x = summarize(&mock_matrix("X", xc)).unwrap();
        let y = summarize(&mock_matrix("Y", yc)).unwrap();
        let rep = compare(&[x, y]).unwrap();
        assert_eq!(rep.by_diagonal_mean[0].arch, "X");
        assert_eq!(rep.by_min_cell[0].arch, "Y");
        assert!(rep.generalization_gaps[0].value > rep.generalization_gaps[1].value);
    }

    #[test]
    fn compare_refuses_mixed_snapshots_and_breaks_ties_by_name() {
        let a = summarize(&mock_matrix("A", [[0.9; 4]; 4])).unwrap();
        let mut b = summarize(&mock_matrix("B", [[0.9; 4]; 4])).unwrap();
        let tied = compare(&[b.clone(), a.clone()]).unwrap();
        let names: Vec<&str> = tied.by_overall_mean.iter().map(|r| r.arch.as_str()).collect();
        assert_eq!(names, ["A", "B"], "ties order by name");

        b.dataset_fingerprint = "other".to_string();
        assert!(matches!(compare(&[a, b]), Err(Error::SnapshotMismatch { .. })));
    }

    #[test]
    fn arch_spec_parses_families_and_oracle() {
        assert_eq!(ArchSpec::from_name("oracle").unwrap(), ArchSpec::Oracle);
        match ArchSpec::from_name("WaveMixNet").unwrap() {
            ArchSpec::Real(cfg) => assert_eq!(cfg.family, Family::WaveMixNet),
            other => panic!("{other:?}"),
        }
        assert!(ArchSpec::from_name("resnet50").is_err());
    }
}
