//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any of them fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hapnet_core::baseline::{evaluate_lasso, fit_lasso, LassoConfig};
use hapnet_core::capsule::{dynamic_routing, CapsuleLevel, PoseVar, RoutingParams};
use hapnet_core::datagen::{generate_with_truth, GroundTruth};
use hapnet_core::eval::predict_split;
use hapnet_core::numeric::gradcheck::{gradient_check, DifferentiableProgram};
use hapnet_core::numeric::{Tape, Var};
use hapnet_core::params::GradBuffer;
use hapnet_core::{
    ablation_suite_modes, evaluate, generate, mape, split, AblationMode, Dataset, EvalReport,
    EventCluster, HapNet, ModelConfig, ParamStore, Split, SubjectRecord, SyntheticConfig, Tensor,
    TrainConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_x(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 6,
        n_e: 3,
        n_u: 2,
        n_s: 2,
        n_v: 2,
        n_z: 2,
        h: 3,
        routing_iters: 3,
        heads: 2,
        beta: 0.1,
        head_hidden: 4,
        decoder_hidden: 5,
        seed: 21,
    }
}

struct Batch {
    model: HapNet,
    samples: Vec<(Vec<f64>, EventCluster, f64)>,
}

impl DifferentiableProgram for Batch {
    fn params(&self) -> &ParamStore {
        &self.model.store
    }

    fn build(&self, tape: &mut Tape, params: &ParamStore) -> hapnet_core::Result<Var> {
        let mut total = None;
        for (x, cl, y) in &self.samples {
            let (l, _) = self.model.sample_loss_with(
                tape,
                params,
                x,
                cl,
                *y,
                AblationMode::Full,
                self.samples.len(),
            )?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(total.expect("nonempty batch"))
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut model = HapNet::new(tiny_config()).map_err(err)?;
    // Nonzero biases keep the reconstruction away from the origin, where the
    // cosine term is too flat for central differences.
    for id in [model.decoder.b1, model.decoder.b2, model.head.b1] {
        model
            .store
            .update(id, |_, _| rng.random_range(-0.5..0.5))
            .map_err(err)?;
    }
    let samples = [vec![1], vec![3], vec![1, 2], vec![2, 3], vec![1, 2, 3]]
        .into_iter()
        .map(|ids| {
            let x = random_x(6, &mut rng);
            let cluster = EventCluster::new(ids).unwrap();
            // Targets near the prediction keep the loss O(1) so that
            // difference quotients are not swamped by rounding.
            let y_hat = model
                .predict(&x, &cluster, AblationMode::Full)
                .unwrap()
                .y_hat;
            (x, cluster, y_hat + rng.random_range(-1.0..1.0))
        })
        .collect();
    let report = gradient_check(&Batch { model, samples }, 1e-4).map_err(err)?;
    let elapsed = start.elapsed();
    ensure(report.passed(), || format!("{report:?}"))?;
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "max rel error {:.2e} over {} elements in {:.2?}",
        report.max_rel_error, report.elements_checked, elapsed
    ))
}

fn routing_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_row: f64 = 0.0;
    let mut max_norm: f64 = 0.0;
    for k in 0..1000 {
        let n_in = rng.random_range(1..=12);
        let n_out = rng.random_range(1..=8);
        let dim_in = rng.random_range(1..=8);
        let dim_out = rng.random_range(1..=8);
        let iters = rng.random_range(1..=5);
        let scale = [0.1, 1.0, 5.0][k % 3];
        let mut store = ParamStore::new();
        let params = RoutingParams::init(
            &mut store, &mut rng, "r", n_in, n_out, dim_in, dim_out, scale,
        )
        .map_err(err)?;
        let raw: Vec<f64> = (0..n_in * dim_in)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        let mut tape = Tape::new();
        let input = tape.input(&Tensor::matrix(n_in, dim_in, raw).map_err(err)?);
        let squashed = tape.squash_rows(input).map_err(err)?;
        let pose = PoseVar {
            var: squashed,
            level: CapsuleLevel::Feature,
            count: n_in,
            dim: dim_in,
        };
        let (out, vars) =
            dynamic_routing(&mut tape, &store, &params, pose, CapsuleLevel::Event, iters)
                .map_err(err)?;
        let c = vars.state(&tape).couplings;
        for i in 0..n_in {
            let s: f64 = c.row(i).iter().sum();
            worst_row = worst_row.max((s - 1.0).abs());
        }
        let outputs = tape.tensor(out.var);
        for j in 0..n_out {
            let n = outputs.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            max_norm = max_norm.max(n);
        }
        let inputs = tape.tensor(squashed);
        for i in 0..n_in {
            let n = inputs.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            max_norm = max_norm.max(n);
        }
    }
    ensure(worst_row <= 1e-9, || {
        format!("coupling row sum off by {worst_row:e}")
    })?;
    ensure(max_norm < 1.0, || format!("capsule norm {max_norm}"))?;
    Ok(format!(
        "max |row sum - 1| {worst_row:.1e}, max capsule norm {max_norm:.6}"
    ))
}

fn event_isolation() -> Outcome {
    let model = HapNet::new(ModelConfig {
        n_e: 6,
        seed: 3,
        ..ModelConfig::default()
    })
    .map_err(err)?;
    let cluster = EventCluster::new(vec![1, 3]).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut used = [false; 7];
    for _ in 0..100 {
        let x = random_x(model.config.d, &mut rng);
        let y = rng.random_range(5.0..20.0);
        let mut tape = Tape::new();
        let (loss, _) = model
            .sample_loss_with(
                &mut tape,
                &model.store,
                &x,
                &cluster,
                y,
                AblationMode::Full,
                1,
            )
            .map_err(err)?;
        let grads = tape.backward(loss).map_err(err)?;
        let mut buf = GradBuffer::zeros_like(&model.store);
        tape.accumulate_param_grads(&grads, &mut buf);
        for (e, seen) in used.iter_mut().enumerate().skip(1) {
            let nonzero = model
                .event_param_ids(e)
                .map_err(err)?
                .iter()
                .any(|id| buf.get(*id).iter().any(|&g| g != 0.0));
            if [2, 4, 5, 6].contains(&e) {
                ensure(!nonzero, || format!("event {e} received a gradient"))?;
            }
            *seen |= nonzero;
        }
    }
    ensure(used[1] && used[3], || {
        "events 1 and 3 never received a gradient".into()
    })?;
    Ok("events 2, 4, 5, 6 have exactly zero gradient on 100 subjects".into())
}

/// The three-event outcome formulas written out case by case.
fn e3_formula(truth: &GroundTruth, x: &[f64], ids: &[usize]) -> f64 {
    let dot = |v: &[f64]| v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    let shifted = |v: &[f64], m: &[f64]| dot(v) + dot(m);
    let (a, b, c) = (
        &truth.coefficients[0],
        &truth.coefficients[1],
        &truth.coefficients[2],
    );
    let m_ca = &truth.modifiers[&(3, 1)];
    let m_cb = &truth.modifiers[&(3, 2)];
    let ta = |t: f64| 5.0 + 2.0 * t.sin();
    let tb = |t: f64| 5.0 + 2.0 * t.cos();
    let tc = |t: f64| 5.0 + t.sin() + t.cos();
    match ids {
        [1] => ta(dot(a)),
        [2] => tb(dot(b)),
        [3] => tc(dot(c)),
        [1, 2] => ta(dot(a)) + tb(dot(b)),
        [1, 3] => ta(shifted(a, m_ca)) + tc(dot(c)),
        [2, 3] => tb(shifted(b, m_cb)) + tc(dot(c)),
        [1, 2, 3] => ta(shifted(a, m_ca)) + tb(shifted(b, m_cb)) + tc(dot(c)),
        other => f64::NAN * other.len() as f64,
    }
}

fn generator_oracle() -> Outcome {
    let cfg = SyntheticConfig {
        subjects_per_cluster: 100,
        noise_std: 0.0,
        seed: 404,
        ..SyntheticConfig::preset(3)
    };
    let (ds, truth) = generate_with_truth(&cfg).map_err(err)?;
    ensure(ds.len() == 700, || format!("{} records", ds.len()))?;
    let clusters = ds.clusters();
    ensure(clusters.len() == 7, || {
        format!("{} clusters", clusters.len())
    })?;
    let mut worst: f64 = 0.0;
    for r in &ds.records {
        let expect = e3_formula(&truth, &r.x, r.cluster.canonical().ids());
        let diff = (r.y - expect).abs();
        ensure(diff < 1e-10, || {
            format!("cluster {:?}: {} vs {expect}", r.cluster.ids(), r.y)
        })?;
        worst = worst.max(diff);
    }
    Ok(format!(
        "700 records, 7 clusters, max |y - oracle| {worst:.1e}"
    ))
}

const ORDERING_D: usize = 8;
const ORDERING_EPOCHS: usize = 100;

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: ORDERING_EPOCHS,
        ..TrainConfig::default()
    }
}

fn dataset(n_e: usize, per_cluster: usize, seed: u64) -> hapnet_core::Result<Dataset> {
    let cfg = SyntheticConfig {
        subjects_per_cluster: per_cluster,
        d: ORDERING_D,
        seed,
        ..SyntheticConfig::preset(n_e)
    };
    split(&generate(&cfg)?, seed)
}

fn ordering() -> Outcome {
    let start = Instant::now();
    let modes = [
        AblationMode::Full,
        AblationMode::NoRecon,
        AblationMode::NoPaaa,
    ];
    let seeds = [0u64, 1, 2];
    let mut sums = [0.0; 4];
    for &seed in &seeds {
        let ds = dataset(3, 1000, seed).map_err(err)?;
        let mc = ModelConfig {
            d: ORDERING_D,
            n_e: 3,
            ..ModelConfig::default()
        };
        let table =
            ablation_suite_modes(&ds, &mc, &train_config(), &[seed], &modes, None).map_err(err)?;
        for (k, run) in table.runs.iter().enumerate() {
            sums[k] += run.test_mape;
        }
        let train: Vec<&SubjectRecord> = ds.split_records(Split::Train).collect();
        let lasso = fit_lasso(&train, 3, &LassoConfig::default()).map_err(err)?;
        sums[3] += evaluate_lasso(&lasso, &ds, Split::Test)
            .map_err(err)?
            .mape_mean;
    }
    let m = sums.map(|s| s / seeds.len() as f64);
    let e3 = format!(
        "E3 full {:.3} < no-recon {:.3} < no-paaa {:.3} < linear {:.3}",
        m[0], m[1], m[2], m[3]
    );
    ensure(m[0] < m[1] && m[1] < m[2] && m[2] < m[3], || e3.clone())?;

    let ds6 = dataset(6, 200, 0).map_err(err)?;
    let mc6 = ModelConfig {
        d: ORDERING_D,
        n_e: 6,
        ..ModelConfig::default()
    };
    let t6 = ablation_suite_modes(
        &ds6,
        &mc6,
        &train_config(),
        &[0],
        &[AblationMode::Full, AblationMode::NoPaaa],
        None,
    )
    .map_err(err)?;
    let gap = t6.runs[1].test_mape - t6.runs[0].test_mape;
    let elapsed = start.elapsed();
    let msg = format!(
        "{e3}; E6 no-paaa minus full {gap:.3} points; {:.0?}",
        elapsed
    );
    ensure(gap >= 1.0, || msg.clone())?;
    ensure(elapsed < Duration::from_secs(30 * 60), || msg.clone())?;
    Ok(msg)
}

fn mape_oracle() -> Outcome {
    let hand = mape(&[100.0], &[90.0]).map_err(err)?.mean;
    ensure(hand == 10.0, || format!("hand case gave {hand}"))?;
    let ds = dataset(3, 30, 606).map_err(err)?;
    let model = HapNet::new(ModelConfig {
        d: ORDERING_D,
        ..ModelConfig::default()
    })
    .map_err(err)?;
    let mut worst: f64 = 0.0;
    for split_kind in [Split::Train, Split::Valid, Split::Test] {
        let report = evaluate(&model, AblationMode::Full, &ds, split_kind).map_err(err)?;
        let mut total = 0.0;
        let mut n = 0.0;
        for r in ds.split_records(split_kind) {
            let y_hat = model
                .predict(&r.x, &r.cluster, AblationMode::Full)
                .map_err(err)?
                .y_hat;
            total += ((r.y - y_hat) / r.y).abs();
            n += 1.0;
        }
        let brute = 100.0 * total / n;
        let diff = (report.mape_mean - brute).abs();
        ensure(diff <= 1e-12, || {
            format!("{split_kind}: {} vs {brute}", report.mape_mean)
        })?;
        worst = worst.max(diff);
    }
    Ok(format!(
        "[100] vs [90] gives 10%, evaluate vs brute force {worst:.1e}"
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hapnet"))
        .args(args)
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        format!(
            "hapnet {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let p = |name: &str| dir.path().join(name);
    let config = p("run.cfg");
    std::fs::write(&config, "epochs = 2\nbatch_size = 32\n").map_err(err)?;
    for run in ["a", "b"] {
        let data = p(&format!("data-{run}.jsonl"));
        let ckpt = p(&format!("ckpt-{run}.json"));
        run_cli(&[
            "gen-data",
            "--events",
            "3",
            "--subjects-per-cluster",
            "20",
            "--d",
            "8",
            "--seed",
            "7",
            "--out",
            data.to_str().unwrap(),
        ])?;
        run_cli(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            ckpt.to_str().unwrap(),
        ])?;
    }
    let same_data = read(&p("data-a.jsonl"))? == read(&p("data-b.jsonl"))?;
    let same_ckpt = read(&p("ckpt-a.json"))? == read(&p("ckpt-b.json"))?;
    ensure(same_data, || "dataset files differ".into())?;
    ensure(same_ckpt, || "checkpoints differ".into())?;
    Ok("dataset and checkpoint bytes identical across two runs".into())
}

fn check_identities(report: &EvalReport, split_len: usize) -> Result<(), String> {
    let count: usize = report.per_cluster.values().map(|g| g.count).sum();
    ensure(
        count == split_len && report.total.count == split_len,
        || format!("counts {count}/{} vs {split_len}", report.total.count),
    )?;
    let sum_y = report.per_cluster.values().fold(0.0, |a, g| a + g.sum_y);
    let sum_yhat = report.per_cluster.values().fold(0.0, |a, g| a + g.sum_yhat);
    ensure(
        sum_y.to_bits() == report.total.sum_y.to_bits()
            && sum_yhat.to_bits() == report.total.sum_yhat.to_bits(),
        || "total sums differ from the sum of cluster sums".into(),
    )
}

fn aggregation_identities() -> Outcome {
    let mut checked = 0;
    for (n_e, per, seed) in [(3, 40, 801), (6, 5, 802), (9, 3, 803)] {
        let ds = dataset(n_e, per, seed).map_err(err)?;
        let model = HapNet::new(ModelConfig {
            d: ORDERING_D,
            n_e,
            seed,
            ..ModelConfig::default()
        })
        .map_err(err)?;
        for split_kind in [Split::Train, Split::Valid, Split::Test] {
            for mode in AblationMode::ALL {
                let report = evaluate(&model, mode, &ds, split_kind).map_err(err)?;
                check_identities(&report, ds.split_len(split_kind))?;
                checked += 1;
            }
            let records: Vec<&SubjectRecord> = ds.split_records(split_kind).collect();
            let y_hat = predict_split(&model, &ds, split_kind, AblationMode::Full).map_err(err)?;
            let perturbed: Vec<f64> = y_hat.iter().map(|v| v * 1.37 + 0.1).collect();
            let report =
                EvalReport::from_predictions("perturbed", split_kind, &records, &perturbed)
                    .map_err(err)?;
            check_identities(&report, records.len())?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} reports satisfy the count and sum identities"
    ))
}

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let models: Vec<HapNet> = [3usize, 6, 9]
        .iter()
        .map(|&n_e| {
            HapNet::new(ModelConfig {
                n_e,
                seed: n_e as u64,
                ..ModelConfig::default()
            })
        })
        .collect::<hapnet_core::Result<_>>()
        .map_err(err)?;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let model = &models[rng.random_range(0..models.len())];
        let n_e = model.config.n_e;
        let size = rng.random_range(2..=n_e.min(5));
        let mut ids: Vec<usize> = (1..=n_e).collect();
        ids.shuffle(&mut rng);
        ids.truncate(size);
        let x = random_x(model.config.d, &mut rng);
        let base = model
            .predict(
                &x,
                &EventCluster::new(ids.clone()).map_err(err)?,
                AblationMode::Full,
            )
            .map_err(err)?
            .y_hat;
        ids.shuffle(&mut rng);
        let permuted = model
            .predict(
                &x,
                &EventCluster::new(ids.clone()).map_err(err)?,
                AblationMode::Full,
            )
            .map_err(err)?
            .y_hat;
        let diff = (base - permuted).abs();
        ensure(diff <= 1e-12, || {
            format!("cluster {ids:?}: {base} vs {permuted}")
        })?;
        worst = worst.max(diff);
    }
    Ok(format!("200 reorderings, max |Δŷ| {worst:.1e}"))
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("gradient correctness", gradient_correctness),
        ("routing invariants", routing_invariants),
        ("event isolation", event_isolation),
        ("generator oracle", generator_oracle),
        ("ablation ordering", ordering),
        ("mape oracle", mape_oracle),
        ("determinism", determinism),
        ("aggregation identities", aggregation_identities),
        ("permutation invariance", permutation_invariance),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name} ({secs:.1}s): {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name} ({secs:.1}s): {detail}", k + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
