//! Experiment commands behind the `shakedrop` binary: train, eval,
//! gradient check, parameter sweep and the expectation test.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{ParamStore, Tape, Targets, Var};
use crate::config::ExperimentConfig;
use crate::data::{format_significant, CsvMetricsSink};
use crate::error::{Error, Result};
use crate::gradcheck::{compare_with_central_differences, finite_diff_check, GradCheckReport};
use crate::network::{build_network, init_parameters, run_layers, ForwardCtx, FrozenDraws, Network};
use crate::regularizers::{derive_seed, shakedrop_frozen, FrozenDraw, Phase, RegularizerKind};
use crate::tensor::Tensor;
use crate::train::{evaluate, run_normalization, train, MetricsSink, Stream, TrainReport};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PARAMS_FILE: &str = "params.bin";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "depth,p_L,final_eval_top1,status";

/// Builds the configured network with seeded MSRA initialization.
pub fn prepare_network(cfg: &ExperimentConfig) -> Result<Network> {
    let mut net = build_network(&cfg.arch)?;
    init_parameters(&mut net, &mut Stream::Init.rng(cfg.seed));
    Ok(net)
}

/// Writes all parameter values as a little-endian `u64` count followed by
/// little-endian `f64` values in registration order.
pub fn write_params(path: &Path, store: &ParamStore) -> Result<()> {
    let values = store.flatten_values();
    let mut bytes = Vec::with_capacity(8 + 8 * values.len());
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    let bad = |detail: String| Error::Parse(format!("{}: {detail}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("missing count header".into()));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != count * 8 {
        return Err(bad(format!("header says {count} values, body holds {} bytes", body.len())));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Trains per the config and writes `config.resolved`, `metrics.csv` and
/// `params.bin` into `out`. Divergence is an error, reported after the
/// partial outputs are written.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let (train_set, eval_set) = cfg.data.load()?;
    let mut net = prepare_network(cfg)?;
    let mut csv = CsvMetricsSink::create(&out.join(METRICS_FILE))?;
    let sinks: &mut [&mut dyn MetricsSink] = &mut [&mut csv];
    let report = train(&mut net, &train_set, &eval_set, &cfg.train_config(), sinks)?;
    write_params(&out.join(PARAMS_FILE), &net.params)?;
    match &report.diverged {
        Some(reason) => Err(Error::Diverged(reason.clone())),
        None => Ok(report),
    }
}

/// Loads `params.bin` from `out` and evaluates on the eval split.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<(f64, f64)> {
    cfg.validate()?;
    let (train_set, eval_set) = cfg.data.load()?;
    let mut net = build_network(&cfg.arch)?;
    net.params.load_flat(&read_params(&out.join(PARAMS_FILE))?)?;
    let norm = run_normalization(&train_set, &cfg.augment);
    evaluate(&net, &eval_set, &norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckLine {
    pub name: String,
    pub report: GradCheckReport,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSummary {
    pub lines: Vec<GradcheckLine>,
    /// Measured branch-gradient ratio under frozen `alpha = 0.2`,
    /// `beta = 0.8`; the intended value is `beta / alpha = 4`.
    pub ratio: f64,
    pub ratio_deviation: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed) && self.ratio_deviation <= 1e-9
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `sum(out * weights)`, a loss with a non-trivial gradient for any op.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.input(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Probes at most this many input elements per block check.
const BLOCK_PROBES: usize = 256;

/// Finite-difference checks of every deterministic op and of each block of
/// the configured network with coupled frozen draws, plus the decoupled
/// branch-gradient ratio.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckSummary> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 0x67c));
    let eps = cfg.gradcheck.eps;
    let tol = cfg.gradcheck.tolerance;
    let mut lines = Vec::new();
    let mut push = |name: String, report: GradCheckReport| {
        let passed = report.passes(tol);
        lines.push(GradcheckLine { name, report, passed });
    };

    // Deterministic ops.
    let x = random_tensor(&mut rng, &[2, 3, 5, 5]);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3]);
    let r = random_tensor(&mut rng, &[2, 4, 5, 5]);
    let r2 = random_tensor(&mut rng, &[2, 4, 3, 3]);
    push(
        "conv2d/input".into(),
        finite_diff_check(
            |t, v| {
                let wv = t.input(w.clone());
                let out = t.conv2d(v, wv, 1, 1)?;
                weighted_sum(t, out, &r)
            },
            &x,
            eps,
        )?,
    );
    push(
        "conv2d/weight".into(),
        finite_diff_check(
            |t, v| {
                let xv = t.input(x.clone());
                let out = t.conv2d(xv, v, 2, 1)?;
                weighted_sum(t, out, &r2)
            },
            &w,
            eps,
        )?,
    );
    let a = random_tensor(&mut rng, &[3, 4]);
    let lw = random_tensor(&mut rng, &[4, 5]);
    let lb = random_tensor(&mut rng, &[5]);
    let lr = random_tensor(&mut rng, &[3, 5]);
    push(
        "linear/input".into(),
        finite_diff_check(
            |t, v| {
                let (wv, bv) = (t.input(lw.clone()), t.input(lb.clone()));
                let out = t.linear(v, wv, bv)?;
                weighted_sum(t, out, &lr)
            },
            &a,
            eps,
        )?,
    );
    push(
        "linear/weight".into(),
        finite_diff_check(
            |t, v| {
                let (xv, bv) = (t.input(a.clone()), t.input(lb.clone()));
                let out = t.linear(xv, v, bv)?;
                weighted_sum(t, out, &lr)
            },
            &lw,
            eps,
        )?,
    );
    push(
        "linear/bias".into(),
        finite_diff_check(
            |t, v| {
                let (xv, wv) = (t.input(a.clone()), t.input(lw.clone()));
                let out = t.linear(xv, wv, v)?;
                weighted_sum(t, out, &lr)
            },
            &lb,
            eps,
        )?,
    );
    let bx = random_tensor(&mut rng, &[4, 2, 3, 3]);
    let gamma = random_tensor(&mut rng, &[2]);
    let shift = random_tensor(&mut rng, &[2]);
    let br = random_tensor(&mut rng, &[4, 2, 3, 3]);
    push(
        "batchnorm2d/train".into(),
        finite_diff_check(
            |t, v| {
                let (g, s) = (t.input(gamma.clone()), t.input(shift.clone()));
                let (out, _) = t.batch_norm(v, g, s, None, 1e-5)?;
                weighted_sum(t, out, &br)
            },
            &bx,
            eps,
        )?,
    );
    push(
        "relu".into(),
        finite_diff_check(
            |t, v| {
                let out = t.relu(v);
                weighted_sum(t, out, &br)
            },
            &bx,
            eps,
        )?,
    );
    let bx2 = random_tensor(&mut rng, &[4, 2, 3, 3]);
    push(
        "add".into(),
        finite_diff_check(
            |t, v| {
                let other = t.input(bx2.clone());
                let out = t.add(v, other)?;
                let sq = t.mul(out, out)?;
                weighted_sum(t, sq, &br)
            },
            &bx,
            eps,
        )?,
    );
    let pr = random_tensor(&mut rng, &[4, 2]);
    push(
        "global_avg_pool".into(),
        finite_diff_check(
            |t, v| {
                let out = t.global_avg_pool(v)?;
                weighted_sum(t, out, &pr)
            },
            &bx,
            eps,
        )?,
    );
    let logits = random_tensor(&mut rng, &[4, 5]);
    let labels = [0usize, 3, 4, 1];
    push(
        "softmax_cross_entropy".into(),
        finite_diff_check(|t, v| t.softmax_cross_entropy(v, Targets::Labels(&labels)), &logits, eps)?,
    );
    let soft = Tensor::new(&[4, 5], {
        let mut d = vec![0.0; 20];
        for (i, row) in d.chunks_mut(5).enumerate() {
            row[i] = 0.3;
            row[(i + 2) % 5] = 0.7;
        }
        d
    })?;
    push(
        "softmax_cross_entropy/soft".into(),
        finite_diff_check(|t, v| t.softmax_cross_entropy(v, Targets::Soft(&soft)), &logits, eps)?,
    );
    let sr = random_tensor(&mut rng, &[4, 4, 2, 2]);
    push(
        "shortcut".into(),
        finite_diff_check(
            |t, v| {
                let out = t.shortcut(v, 2, 4)?;
                weighted_sum(t, out, &sr)
            },
            &bx,
            eps,
        )?,
    );

    // Whole blocks with coupled draws.
    let net = prepare_network(cfg)?;
    let (c, h, wd) = cfg.arch.input_shape;
    let input = random_tensor(&mut rng, &[cfg.gradcheck.batch, c, h, wd]);
    let block_inputs = block_inputs(&net, &input)?;
    let draws: Vec<(&str, FrozenDraw)> = match cfg.arch.regularizer.kind {
        RegularizerKind::None => vec![("vanilla", FrozenDraw::identity())],
        RegularizerKind::RandomDrop => vec![
            ("gate-open", FrozenDraw::new(true, 0.0, 0.0)),
            ("gate-closed", FrozenDraw::new(false, 0.0, 0.0)),
        ],
        _ => vec![
            ("gate-open", FrozenDraw::new(true, 0.3, 0.3)),
            ("coupled-0.3", FrozenDraw::new(false, 0.3, 0.3)),
        ],
    };
    for (block, x) in net.blocks.iter().zip(&block_inputs) {
        for (label, draw) in &draws {
            let probe_rng = &mut rng;
            let out_shape = {
                let mut t = Tape::new();
                let v = t.input(x.clone());
                let mut ctx = ForwardCtx::frozen(FrozenDraws::all(*draw));
                let y = net.block_forward(block, &mut t, v, &mut ctx)?;
                t.value(y).shape().to_vec()
            };
            let weights = random_tensor(probe_rng, &out_shape);
            let loss = |probe: &Tensor, tape: &mut Tape| -> Result<(Var, Var)> {
                let v = tape.input(probe.clone());
                let mut ctx = ForwardCtx::frozen(FrozenDraws::all(*draw));
                let y = net.block_forward(block, tape, v, &mut ctx)?;
                Ok((v, weighted_sum(tape, y, &weights)?))
            };
            let mut tape = Tape::new();
            let (v, l) = loss(x, &mut tape)?;
            let mut scratch = net.params.clone();
            tape.backward(l, &mut scratch)?;
            let analytic = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            let picks: Vec<usize> = sample(probe_rng, x.len(), x.len().min(BLOCK_PROBES)).into_vec();
            let report = compare_with_central_differences(
                |p| {
                    let mut t = Tape::new();
                    let (_, l) = loss(p, &mut t)?;
                    Ok(t.value(l).item())
                },
                x,
                &analytic,
                eps,
                Some(&picks),
            )?;
            push(format!("block{}/{label}", block.index), report);
        }
    }

    let (ratio, ratio_deviation) = branch_gradient_ratio(&net, &block_inputs[0], &mut rng, 0.2, 0.8)?;
    Ok(GradcheckSummary {
        lines,
        ratio,
        ratio_deviation,
    })
}

/// Inputs seen by every block when `input` runs through the network in the
/// training phase with identity draws.
fn block_inputs(net: &Network, input: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::frozen(FrozenDraws::all(FrozenDraw::identity()));
    let v = tape.input(input.clone());
    let mut x = run_layers(&net.stem, &mut tape, &net.params, v, Phase::Train)?;
    let mut out = Vec::with_capacity(net.blocks.len());
    for block in &net.blocks {
        out.push(tape.value(x).clone());
        x = net.block_forward(block, &mut tape, x, &mut ctx)?;
    }
    Ok(out)
}

/// Ratio of the gradient reaching the first branch of the first block under
/// a frozen ShakeDrop unit `(gate 0, alpha, beta)` to the finite-difference
/// slope of the same forward map. Returns the median ratio and the largest
/// deviation from `beta / alpha`.
fn branch_gradient_ratio(
    net: &Network,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
    alpha: f64,
    beta: f64,
) -> Result<(f64, f64)> {
    let block = &net.blocks[0];
    let branch = {
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let f = run_layers(&block.branches[0], &mut t, &net.params, v, Phase::Train)?;
        t.value(f).clone()
    };
    let weights = Tensor::from_fn(branch.shape(), |_| rng.gen_range(0.5..1.5));
    let loss = |f: &Tensor, tape: &mut Tape| -> Result<(Var, Var)> {
        let v = tape.input(f.clone());
        let y = shakedrop_frozen(tape, v, false, &Tensor::full(&[1; 4], alpha), &Tensor::full(&[1; 4], beta))?;
        Ok((v, weighted_sum(tape, y, &weights)?))
    };
    let mut tape = Tape::new();
    let (v, l) = loss(&branch, &mut tape)?;
    tape.backward(l, &mut ParamStore::new())?;
    let analytic = tape.grad(v).expect("branch reached by the loss").clone();
    // The forward map is linear in the branch, so a wide step is exact up
    // to rounding.
    let h = 1e-2;
    let mut probe = branch.clone();
    let mut ratios = Vec::new();
    let picks: Vec<usize> = sample(rng, branch.len(), branch.len().min(BLOCK_PROBES)).into_vec();
    for i in picks {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = {
            let mut t = Tape::new();
            let (_, l) = loss(&probe, &mut t)?;
            t.value(l).item()
        };
        probe.data_mut()[i] = orig - h;
        let fm = {
            let mut t = Tape::new();
            let (_, l) = loss(&probe, &mut t)?;
            t.value(l).item()
        };
        probe.data_mut()[i] = orig;
        ratios.push(analytic.data()[i] / ((fp - fm) / (2.0 * h)));
    }
    let target = beta / alpha;
    let deviation = ratios.iter().map(|r| (r - target).abs()).fold(0.0, f64::max);
    ratios.sort_by(f64::total_cmp);
    Ok((ratios[ratios.len() / 2], deviation))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub depth: usize,
    pub p_last: f64,
    pub final_eval_top1: Option<f64>,
    pub status: String,
}

/// Runs one training per `(p_L, depth)` cell, cell `i` with seed
/// `seed + i`, writing each run to `out/cell-<i>` and the summary to
/// `out/sweep.csv`. Failing cells are recorded and the sweep continues.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let cells = cfg
        .sweep
        .p_last
        .iter()
        .flat_map(|&p| cfg.sweep.depths.iter().map(move |&d| (p, d)));
    for (i, (p_last, depth)) in cells.enumerate() {
        let mut cell = cfg.clone();
        cell.arch.depth = depth;
        cell.arch.regularizer.p_last = p_last;
        cell.seed = cfg.seed.wrapping_add(i as u64);
        let dir = out.join(format!("cell-{i}"));
        let result = cmd_train(&cell, &dir);
        let row = match result {
            Ok(report) => SweepRow {
                depth,
                p_last,
                final_eval_top1: report.records.last().map(|r| r.eval_top1_error),
                status: "ok".into(),
            },
            Err(e) => {
                log::warn!("sweep cell {i} (depth {depth}, p_L {p_last}) failed: {e}");
                SweepRow {
                    depth,
                    p_last,
                    final_eval_top1: None,
                    status: e.to_string().replace([',', '\n'], ";"),
                }
            }
        };
        rows.push(row);
    }
    let mut text = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        let top1 = r
            .final_eval_top1
            .map_or_else(|| "nan".to_string(), format_significant);
        text.push_str(&format!(
            "{},{},{top1},{}\n",
            r.depth,
            format_significant(r.p_last),
            r.status
        ));
    }
    let mut f = fs::File::create(out.join(SWEEP_FILE))?;
    f.write_all(text.as_bytes())?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpectationSummary {
    pub block: usize,
    pub survival: f64,
    pub eval_coefficient: f64,
    pub draws: usize,
    pub max_z: f64,
}

impl ExpectationSummary {
    pub fn passed(&self) -> bool {
        self.max_z <= 5.0
    }
}

fn derive(seed: u64, tag: u64) -> u64 {
    derive_seed(&[seed, tag])
}

/// Monte-Carlo check that the mean of many training-phase outputs of one
/// block (before its trailing ReLU) matches the evaluation-phase output.
/// BN layers run on running statistics in both phases so only the
/// regularizer differs.
pub fn cmd_expectation_test(cfg: &ExperimentConfig) -> Result<ExpectationSummary> {
    cfg.validate()?;
    let reg = &cfg.arch.regularizer;
    if reg.kind == RegularizerKind::None {
        return Err(Error::Config("expectation test needs a regularizer".into()));
    }
    let net = prepare_network(cfg)?;
    let l = cfg.expectation.block.unwrap_or(net.num_blocks());
    let block = net
        .blocks
        .iter()
        .find(|b| b.index == l)
        .ok_or_else(|| Error::Config(format!("block {l} outside 1..={}", net.num_blocks())))?;
    let survival = if reg.uses_decay() { net.survival(l)? } else { 1.0 };

    // Realistic block input: a random batch through the preceding layers.
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 0xe7));
    let (c, h, w) = cfg.arch.input_shape;
    let input = random_tensor(&mut rng, &[cfg.expectation.batch, c, h, w]);
    let x = block_inputs(&net, &input)?.swap_remove(l - 1);

    // Shortcut and branch outputs are deterministic; compute them once.
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let skip_var = tape.shortcut(xv, block.stride, block.out_channels)?;
    let skip = tape.value(skip_var).clone();
    let mut outs = Vec::new();
    for layers in &block.branches {
        let f = run_layers(layers, &mut tape, &net.params, xv, Phase::Eval)?;
        outs.push(tape.value(f).clone());
    }
    let combine = |ctx: &mut ForwardCtx| -> Result<Tensor> {
        let mut t = Tape::new();
        let s = t.input(skip.clone());
        let vars: Vec<Var> = outs.iter().map(|o| t.input(o.clone())).collect();
        let y = net.block_combine(block, &mut t, s, &vars, ctx)?;
        Ok(t.value(y).clone())
    };
    let expected = combine(&mut ForwardCtx::eval())?;

    let m = cfg.expectation.draws;
    let reg_seed = Stream::Regularizer.seed(cfg.seed);
    let mut mean = vec![0.0; expected.len()];
    let mut m2 = vec![0.0; expected.len()];
    for k in 0..m {
        let mut ctx = ForwardCtx::train(reg_seed, k as u64);
        let y = combine(&mut ctx)?;
        let n = (k + 1) as f64;
        for ((mu, s), &v) in mean.iter_mut().zip(&mut m2).zip(y.data()) {
            let d = v - *mu;
            *mu += d / n;
            *s += d * (v - *mu);
        }
    }
    let max_z = max_z_score(&mean, &m2, expected.data(), m);
    let eval_coefficient = reg.eval_coefficient(survival);
    Ok(ExpectationSummary {
        block: l,
        survival,
        eval_coefficient,
        draws: m,
        max_z,
    })
}

/// Largest `|mean - expected| / standard error` over elements; elements
/// with zero spread must match to rounding.
pub fn max_z_score(mean: &[f64], m2: &[f64], expected: &[f64], draws: usize) -> f64 {
    let n = draws as f64;
    mean.iter()
        .zip(m2)
        .zip(expected)
        .map(|((&mu, &s), &e)| {
            let var = s / (n - 1.0);
            let se = (var / n).sqrt();
            let diff = (mu - e).abs();
            if se > 1e-12 * (1.0 + e.abs()) {
                diff / se
            } else if diff <= 1e-9 * (1.0 + e.abs()) {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}
