#![allow(dead_code)]

use layertrace::model::{Batch, ModelSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Desk models used by the oracle-backed tests, all with smooth activations.
pub fn zoo(input: usize, classes: usize) -> Vec<(&'static str, ModelSpec)> {
    let softplus = ModelSpec::parse(&format!(
        "input = {input}\nlayer = dense 6 softplus\nlayer = dense {classes} identity\n"
    ))
    .unwrap();
    vec![
        ("mlp-small", ModelSpec::mlp_small(input, classes)),
        ("mlp-tied", ModelSpec::mlp_tied(input, classes)),
        ("softplus", softplus),
    ]
}

pub fn classification_batch(input: usize, classes: usize, n: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut r, input)).collect();
    let ys: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    Batch::classification(&xs, &ys).unwrap()
}

/// Initial parameters with nonzero biases so every block is exercised.
pub fn random_params(spec: &ModelSpec, seed: u64) -> Vec<f64> {
    let mut r = rng(seed ^ 0x9e37_79b9);
    spec.init_params(seed)
        .into_iter()
        .map(|p| p + 0.1 * r.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn gradient(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Vec<f64> {
    spec.forward(params, batch).unwrap().gradient(false).unwrap()
}

pub fn loss(spec: &ModelSpec, params: &[f64], batch: &Batch) -> f64 {
    spec.forward(params, batch).unwrap().loss()
}

/// Central differences of the loss, one coordinate at a time.
pub fn fd_gradient(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let mut p = params.to_vec();
            p[i] += FD_EPS;
            let up = loss(spec, &p, batch);
            p[i] -= 2.0 * FD_EPS;
            let down = loss(spec, &p, batch);
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// `(g(θ + εv) − g(θ − εv)) / 2ε`.
pub fn fd_hvp(spec: &ModelSpec, params: &[f64], batch: &Batch, v: &[f64]) -> Vec<f64> {
    let plus: Vec<f64> = params.iter().zip(v).map(|(p, x)| p + FD_EPS * x).collect();
    let minus: Vec<f64> = params.iter().zip(v).map(|(p, x)| p - FD_EPS * x).collect();
    let gp = gradient(spec, &plus, batch);
    let gm = gradient(spec, &minus, batch);
    gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * FD_EPS)).collect()
}

/// `max_i |a_i − b_i| / max_i |b_i|`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal));
    (&a + a.transpose()) * 0.5
}

/// Every ±1 vector of length `n`, in binary order.
pub fn sign_vectors(n: usize) -> impl Iterator<Item = Vec<f64>> {
    (0u64..1 << n).map(move |bits| {
        (0..n)
            .map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 })
            .collect()
    })
}

pub fn quad_form(h: &DMatrix<f64>, z: &[f64]) -> f64 {
    let n = z.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += z[i] * h[(i, j)] * z[j];
        }
    }
    s
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Divisor `n − 1`.
pub fn var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Divisor `n`.
pub fn pop_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Large-sample standard error of the sample variance, `√((m₄ − s⁴)/n)`.
pub fn var_std_error(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - m2 * m2) / n).sqrt()
}

pub fn layertrace(cwd: &std::path::Path, args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_layertrace"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ensemble_json(run_id: &str, etas: &[f64], seeds: usize, first_seed: u64) -> serde_json::Value {
    serde_json::json!({
        "base": {
            "run_id": run_id,
            "architecture": "mlp-small",
            "model": "input = 3\nlayer = dense 6 tanh\nlayer = dense 3 identity\n",
            "dataset": {"classes": 3, "train_per_class": 12, "test_per_class": 6, "input_dim": 3,
                        "separation": 1.0, "spread": 1.0, "seed": 5},
            "eta": 0.0,
            "optimizer": {"momentum": 0.9, "learning_rate": 0.1, "cosine": true, "weight_decay": 5e-4},
            "batch_size": 6,
            "epochs": 6,
            "snapshot_every": 2,
            "K": 4,
            "seeds": {"init": 10, "data_order": 20, "probes": 30, "label_noise": 40}
        },
        "etas": etas,
        "seeds": seeds,
        "first_seed": first_seed
    })
}

/// Writes the inputs of a small end-to-end pipeline into `dir` and runs every
/// subcommand on them with relative paths. Returns `(command, stdout)` pairs.
pub fn run_small_pipeline(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let write = |name: &str, text: String| std::fs::write(dir.join(name), text).unwrap();
    write("model.txt", "input = 3\nlayer = dense 4 tanh\nlayer = tied 2 tanh\nlayer = dense 3 identity\n".into());
    write(
        "batch.json",
        serde_json::to_string(&classification_batch(3, 3, 8, 1).to_file()).unwrap(),
    );
    write("clean.json", ensemble_json("clean", &[0.0], 4, 0).to_string());
    write("noisy.json", ensemble_json("noisy", &[0.0, 0.5], 2, 100).to_string());
    write(
        "grid.json",
        serde_json::json!({"clean": "runs/clean-*", "runs": "runs/noisy-*", "k": [0.5, 1.0],
                           "arl0": [20.0], "sequences": 300, "seed": 2})
        .to_string(),
    );
    let steps: &[(&str, &[&str])] = &[
        ("init-params", &["init-params", "--model", "model.txt", "--seed", "3", "--out", "params.json"]),
        ("estimate", &["estimate", "--model", "model.txt", "--params", "params.json", "--batch", "batch.json", "--K", "20", "--seed", "4"]),
        ("oracle", &["oracle", "--model", "model.txt", "--params", "params.json", "--batch", "batch.json", "--compare", "--K", "50", "--dump", "h.bin"]),
        ("train-clean", &["train", "--config", "clean.json", "--out", "runs"]),
        ("train-noisy", &["train", "--config", "noisy.json", "--out", "runs"]),
        ("calibrate", &["calibrate", "--runs", "runs/clean-*", "--arl0", "30", "--sequences", "400", "--seed", "1", "--out", "cal"]),
        ("detect", &["detect", "--baseline", "cal", "--runs", "runs/*", "--out", "detect.json", "--bootstrap", "200", "--seed", "2"]),
        ("sweep", &["sweep", "--grid", "grid.json", "--out", "sweep.json"]),
    ];
    steps
        .iter()
        .map(|(name, args)| {
            let out = layertrace(dir, args);
            assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
            (name.to_string(), out.stdout)
        })
        .collect()
}

/// Every file under `dir` except run metadata, keyed by relative path.
pub fn collect_outputs(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != layertrace::harness::META_FILE {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
