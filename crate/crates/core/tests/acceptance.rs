use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use hppt::digraph::{self, DEFAULT_TOL};
use hppt::harness::{self, Experiment, ExperimentConfig, Report, Strategy};
use hppt::metrics::{fwt, majority_vote_part_count, IoUTable};
use hppt::model::{EncodedSet, ModelConfig, ToyModel, Trainable};
use hppt::refine::{self, RefineConfig, RefineObjective, RefineState};
use hppt::seeding;
use hppt::stream::{Image, LabelGrid, Taxonomy};
use hppt::{ClassId, NodeId, ParsingTree};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn fwt_reproduction() -> Outcome {
    let (si, ca) = (ClassId(1), ClassId(2));
    let mut table = IoUTable::new(2);
    for (c, now, ind) in [(si, 35.28, 32.98), (ca, 9.32, 9.18)] {
        table.set(2, c, now / 100.0).unwrap();
        table.set_ind(c, ind / 100.0).unwrap();
    }
    let taxonomy = Taxonomy {
        new: [si, ca].into(),
        ..Taxonomy::default()
    };
    let v = 100.0 * fwt(&table, 2, &taxonomy).unwrap();
    outcome((v - 1.22).abs() <= 0.005, format!("FWT = {v:.4}"))
}

fn vote_tables() -> Outcome {
    let tables: [(&str, [(&str, [u64; 3], usize); 7]); 2] = [
        (
            "2017",
            [
                ("Large Needle Driver", [156, 213, 828], 3),
                ("Prograsp Forceps", [55, 232, 764], 3),
                ("Bipolar Forceps", [189, 132, 336], 3),
                ("Ultrasound Probe", [294, 103, 52], 1),
                ("Curved Scissors", [54, 205, 92], 2),
                ("Vessel Sealer", [122, 53, 211], 3),
                ("Grasping Retractor", [46, 20, 127], 3),
            ],
        ),
        (
            "2018",
            [
                ("Large Needle Driver", [58, 96, 124], 3),
                ("Prograsp Forceps", [167, 232, 573], 3),
                ("Bipolar Forceps", [395, 132, 1230], 3),
                ("Ultrasound Probe", [103, 34, 52], 1),
                ("Curved Scissors", [205, 1257, 92], 2),
                ("Suction Instrument", [159, 31, 82], 1),
                ("Clip Applier", [6, 26, 12], 2),
            ],
        ),
    ];
    let mut mismatches = Vec::new();
    for (year, rows) in &tables {
        let responses: BTreeMap<ClassId, BTreeMap<usize, u64>> = rows
            .iter()
            .enumerate()
            .map(|(i, (_, f, _))| (ClassId(i as u16 + 1), [(1, f[0]), (2, f[1]), (3, f[2])].into()))
            .collect();
        let got = majority_vote_part_count(&responses).unwrap();
        for (i, (name, _, want)) in rows.iter().enumerate() {
            if got[&ClassId(i as u16 + 1)] != *want {
                mismatches.push(format!("{year} {name}"));
            }
        }
    }
    outcome(mismatches.is_empty(), format!("14 rows, mismatches: {mismatches:?}"))
}

fn random_tree(rng: &mut impl Rng) -> ParsingTree {
    let n_max = rng.random_range(1..=5);
    let leaves = rng.random_range(0..=(49 - n_max));
    let specs: Vec<(ClassId, usize)> = (0..leaves)
        .map(|i| (ClassId(i as u16 + 1), rng.random_range(1..=n_max)))
        .collect();
    ParsingTree::new(n_max, 1, 2, &specs, rng.random())
        .unwrap()
}

/// Edge set oriented by breadth-first search from `start`, weighted by `γ^depth(target)`.
fn bfs_orientation(tree: &ParsingTree, start: NodeId, gamma: f64) -> DMatrix<f64> {
    let n = tree.len();
    let mut nbrs = vec![Vec::new(); n];
    for &(a, b) in tree.edges() {
        nbrs[a.0].push(b.0);
        nbrs[b.0].push(a.0);
    }
    let mut depth = vec![usize::MAX; n];
    let mut adj = DMatrix::zeros(n, n);
    let mut queue = VecDeque::from([start.0]);
    depth[start.0] = 0;
    while let Some(v) = queue.pop_front() {
        for &w in &nbrs[v] {
            if depth[w] == usize::MAX {
                depth[w] = depth[v] + 1;
                adj[(v, w)] = (0..depth[w]).fold(1.0, |acc, _| acc * gamma);
                queue.push_back(w);
            }
        }
    }
    adj
}

/// Solves `πᵀ(T − I) = 0`, `Σπ = 1` by LU.
fn stationary_by_solve(t: &DMatrix<f64>) -> DVector<f64> {
    let n = t.nrows();
    let mut m = t.transpose() - DMatrix::identity(n, n);
    m.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    m.lu().solve(&rhs).expect("singular system")
}

fn graph_oracles() -> Outcome {
    let mut rng = seeding::rng(2024, 3);
    let (mut orient_bad, mut worst_row, mut worst_pi, mut worst_res, mut worst_sym) = (0, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for k in 0..100 {
        let tree = random_tree(&mut rng);
        let leaves: Vec<ClassId> = tree.classes().collect();
        let start = if leaves.is_empty() {
            tree.root()
        } else {
            tree.leaf(leaves[rng.random_range(0..leaves.len())]).unwrap()
        };
        let gamma = rng.random_range(0.01..0.99);
        let g = digraph::orient_and_weight(&tree, start, gamma).unwrap();
        let oracle = bfs_orientation(&tree, start, gamma);
        let pattern_ok = g.adjacency.iter().zip(oracle.iter()).all(|(a, b)| (*a == 0.0) == (*b == 0.0));
        let weights_ok = g
            .adjacency
            .iter()
            .zip(oracle.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-15 * b.abs());
        if !(pattern_ok && weights_ok) {
            orient_bad += 1;
        }
        let self_loop = if k % 2 == 0 { 0.0 } else { 1.0 };
        let t = digraph::transition_matrix_with_self_loops(&g, 0.001, self_loop).unwrap();
        for row in t.matrix.row_iter() {
            worst_row = worst_row.max((row.sum() - 1.0).abs());
        }
        let pi = digraph::stationary_distribution(&t, DEFAULT_TOL, 200_000).unwrap();
        let solved = stationary_by_solve(&t.matrix);
        worst_pi = worst_pi.max((&pi.pi - &solved).amax());
        let residual = (t.matrix.transpose() * &pi.pi - &pi.pi).abs().sum();
        worst_res = worst_res.max(residual.max(pi.residual));
        let p = digraph::propagation_matrix(&t, &pi).unwrap();
        worst_sym = worst_sym.max((&p - p.transpose()).amax());
    }
    let pass = orient_bad == 0 && worst_row <= 1e-12 && worst_pi <= 1e-8 && worst_res < 1e-10 && worst_sym <= 1e-12;
    outcome(
        pass,
        format!(
            "orientation mismatches {orient_bad}, max |row sum - 1| {worst_row:.1e}, max |π - π_LU| {worst_pi:.1e}, \
             max residual {worst_res:.1e}, max asymmetry {worst_sym:.1e}"
        ),
    )
}

fn gradient_instance() -> (ToyModel, ParsingTree, EncodedSet) {
    let cfg = ModelConfig {
        b: 4,
        u: 2,
        ..ModelConfig::default()
    };
    let mut model = ToyModel::new(cfg, 3).unwrap();
    let specs = [(ClassId(1), 1), (ClassId(2), 2), (ClassId(3), 2)];
    let mut tree = ParsingTree::new(3, 2, 4, &specs, 5).unwrap();
    let mut rng = seeding::rng(41, 1);
    for id in tree.nodes().iter().map(|n| n.id).collect::<Vec<_>>() {
        tree.set_tokens(id, DMatrix::from_fn(2, 4, |_, _| rng.random_range(-0.8..0.8))).unwrap();
    }
    for (c, _) in specs {
        model.add_head(c, 11).unwrap();
    }
    let samples: Vec<(Image, LabelGrid)> = (0..2)
        .map(|_| {
            let mut img = Image::zeros(3, 4, 4);
            img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
            let mut lbl = LabelGrid::background(4, 4);
            lbl.labels.iter_mut().for_each(|l| *l = rng.random_range(0..=3));
            (img, lbl)
        })
        .collect();
    let set = model.encode_set(samples.iter().map(|(i, l)| (i, Some(l)))).unwrap();
    (model, tree, set)
}

fn model_fd_error(model: &ToyModel, tree: &ParsingTree, set: &EncodedSet, classes: &[ClassId], trainable: &Trainable) -> f64 {
    let batch = [0, 1];
    let (_, grads) = model.objective_and_gradients(tree, set, &batch, classes, trainable).unwrap();
    let eps = 1e-6;
    let (mut scale, mut err) = (0.0f64, 0.0f64);
    for key in trainable.keys(model) {
        let len = model.param_value(tree, key).unwrap().len();
        for j in 0..len {
            let (mut m, mut t) = (model.clone(), tree.clone());
            m.param_slice_mut(&mut t, key).unwrap()[j] += eps;
            let plus = m.objective(&t, set, &batch, classes).unwrap();
            m.param_slice_mut(&mut t, key).unwrap()[j] -= 2.0 * eps;
            let minus = m.objective(&t, set, &batch, classes).unwrap();
            let num = (plus - minus) / (2.0 * eps);
            let ana = grads.get(key).map(|g| g.as_slice()[j]).unwrap_or(0.0);
            scale = scale.max(num.abs()).max(ana.abs());
            err = err.max((num - ana).abs());
        }
    }
    err / scale.max(f64::MIN_POSITIVE)
}

fn gradient_checks() -> Outcome {
    let (model, tree, set) = gradient_instance();
    let classes = [ClassId(1), ClassId(2), ClassId(3)];
    let first = model_fd_error(&model, &tree, &set, &classes, &Trainable::everything(&tree, &classes).unwrap());
    let new_class = model_fd_error(
        &model,
        &tree,
        &set,
        &[ClassId(2)],
        &Trainable::leaf_and_head(&tree, ClassId(2)).unwrap(),
    );
    let cfg = RefineConfig::default();
    let (_, p, _) = refine::propagation_for(&tree, tree.leaf(ClassId(3)).unwrap(), &cfg).unwrap();
    let mut state = RefineState::from_tree(&tree, cfg);
    let mut rng = seeding::rng(5, 5);
    let d = state.theta.nrows();
    state.theta += DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.1..0.1));
    let obj = RefineObjective {
        tree: &tree,
        model: &model,
        set: &set,
        batch: vec![0, 1],
        classes: classes.to_vec(),
        mixed: &p * &state.node_features,
        vertex_order: state.vertex_order.clone(),
    };
    let theta = refine::finite_difference_check(&state, |t| obj.loss_and_gradient(t), 1e-6).unwrap();
    let worst = first.max(new_class).max(theta);
    outcome(
        worst < 1e-4,
        format!("relative errors: first episode {first:.1e}, new class {new_class:.1e}, theta {theta:.1e}"),
    )
}

struct SeedRuns {
    seed: u64,
    hppt: Report,
    independent: Report,
    seq: Report,
    decoder_frozen: bool,
}

fn model_bits(model: &ToyModel, heads: &BTreeSet<ClassId>) -> Vec<u64> {
    let mut out: Vec<u64> = model.encoder_proj.iter().map(|v| v.to_bits()).collect();
    for layer in &model.layers {
        out.extend(layer.weight.iter().chain(layer.bias.iter()).map(|v| v.to_bits()));
    }
    for c in heads {
        let h = &model.heads[c];
        out.extend(h.weight.iter().chain([&h.bias]).map(|v| v.to_bits()));
    }
    out
}

fn seed_runs(seed: u64) -> SeedRuns {
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let mut exp = Experiment::new(cfg).unwrap();
    let (first, _) = exp.first_episode_state().unwrap();
    let hppt = exp.run(Strategy::Hppt).unwrap();
    let first_heads: BTreeSet<ClassId> = first.heads.keys().copied().collect();
    let decoder_frozen = model_bits(&first, &first_heads) == model_bits(&hppt.model, &first_heads);
    SeedRuns {
        seed,
        hppt: hppt.report,
        independent: exp.run(Strategy::Independent).unwrap().report,
        seq: exp.run(Strategy::SeqFinetune).unwrap().report,
        decoder_frozen,
    }
}

fn freeze_audits(runs: &[SeedRuns]) -> Outcome {
    let mut bad = Vec::new();
    for r in runs {
        let staged: BTreeSet<(usize, &str)> = r.hppt.audits.iter().map(|a| (a.episode, a.stage.as_str())).collect();
        let later = staged.iter().any(|&(t, _)| t >= 2);
        if !r.hppt.audits_passed || !later || !r.decoder_frozen {
            bad.push(r.seed);
        }
    }
    let count: usize = runs.iter().map(|r| r.hppt.audits.len()).sum();
    outcome(bad.is_empty(), format!("{count} audits over {} seeds, failing seeds {bad:?}", runs.len()))
}

/// Summed steps to the threshold over the final episode's new classes; a class
/// that never reaches it counts as one probe interval past the budget.
fn steps_needed(report: &Report) -> usize {
    let penalty = report.config.train.steps + report.config.train.eval_every;
    let last = report.episodes.last().unwrap();
    last.steps_to_threshold.values().map(|s| s.unwrap_or(penalty)).sum()
}

fn forward_transfer(runs: &[SeedRuns]) -> Outcome {
    let mut wins = 0;
    let mut cells = Vec::new();
    for r in runs {
        let (h, i) = (steps_needed(&r.hppt), steps_needed(&r.independent));
        if h < i {
            wins += 1;
        }
        cells.push(format!("seed {}: {h} vs {i}", r.seed));
    }
    outcome(wins >= 4, format!("hppt faster on {wins}/5 ({})", cells.join(", ")))
}

fn backward_transfer(runs: &[SeedRuns]) -> Outcome {
    let mut wins = 0;
    let mut worst: f64 = 0.0;
    let mut cells = Vec::new();
    for r in runs {
        let (h, s) = (r.hppt.bwt.unwrap(), r.seq.bwt.unwrap());
        if h > s {
            wins += 1;
        }
        let disp = r
            .hppt
            .episodes
            .iter()
            .filter_map(|e| e.old_leaf_displacement)
            .fold(0.0, f64::max);
        worst = worst.max(disp);
        cells.push(format!("seed {}: {h:.3} vs {s:.3}", r.seed));
    }
    outcome(
        wins >= 4 && worst < 1e-3,
        format!(
            "BWT hppt > seq_finetune on {wins}/5 ({}); max old-leaf displacement {worst:.2e}",
            cells.join(", ")
        ),
    )
}

fn determinism(reference: &Report) -> Outcome {
    let first = serde_json::to_string_pretty(reference).unwrap();
    let mut exp = Experiment::new(ExperimentConfig::default()).unwrap();
    let out = exp.run(Strategy::Hppt).unwrap();
    let dir = tempfile::tempdir().unwrap();
    harness::write_outputs(dir.path(), &exp, &out).unwrap();
    let written = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let same = written == first + "\n";
    outcome(same, format!("report.json {} bytes, identical: {same}", written.len()))
}

fn gamma_sweep() -> Outcome {
    let gammas = [0.01, 0.05, 0.2, 0.5];
    let mut exp = Experiment::new(ExperimentConfig::default()).unwrap();
    let rows = exp.sweep_gamma(&gammas).unwrap();
    println!("    gamma  old_leaf_displacement  bwt       mean_iou");
    for r in &rows {
        println!(
            "    {:<5}  {:<21.6e}  {:<8.4}  {:.4}",
            r.gamma,
            r.old_leaf_displacement.unwrap_or(f64::NAN),
            r.bwt.unwrap_or(f64::NAN),
            r.mean_iou
        );
    }
    let disp: Vec<f64> = rows.iter().map(|r| r.old_leaf_displacement.unwrap_or(f64::NAN)).collect();
    let monotone = disp.windows(2).all(|w| w[0] <= w[1]);
    outcome(monotone, format!("displacement monotone in gamma: {monotone}"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} ({name}): {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "FWT reproduction", fwt_reproduction());
    record(2, "majority-vote tables", vote_tables());
    record(3, "graph kernel oracles", graph_oracles());
    record(4, "gradient correctness", gradient_checks());
    let pool = harness::thread_pool().unwrap();
    let t0 = Instant::now();
    let runs: Vec<SeedRuns> = pool.install(|| SEEDS.par_iter().map(|&s| seed_runs(s)).collect());
    let transfer_secs = t0.elapsed().as_secs_f64();
    record(5, "freeze audits", freeze_audits(&runs));
    record(6, "forward transfer", {
        let mut o = forward_transfer(&runs);
        o.detail.push_str(&format!("; {transfer_secs:.0} s"));
        o.pass &= transfer_secs < 300.0;
        o
    });
    record(7, "backward transfer", backward_transfer(&runs));
    let reference = runs.iter().find(|r| r.seed == 0).unwrap();
    record(8, "determinism", determinism(&reference.hppt));
    record(9, "gamma sweep", gamma_sweep());
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.0} s; failing: {failed:?}",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
