//! Acceptance gate: one pass/fail line per criterion, exit status 1 if any
//! criterion fails. Runs as a plain binary (`harness = false`); numeric
//! arguments select criteria, e.g. `cargo test --test acceptance -- 3 9`.

use std::time::{Duration, Instant};

use fedepth::analysis::{compare_models, Measure, PROBE_SIZE};
use fedepth::data::{stratified_split, GaussianMixture};
use fedepth::decomposition::{decompose, preresnet20_reference_plan, DecompositionPlan};
use fedepth::experiment::{level_budgets, setup, sweep, BudgetMode, ExperimentConfig, FamilyName, TrainerName};
use fedepth::federation::{aggregate, normalized_coefficients};
use fedepth::memory::{block_cost_ratios, CostModel, MemoryBudget};
use fedepth::nn::{loss, predict, Block, BlockGraph, LayerSpec, ModelWeights, Owner, Params, Shape, Tape, Tensor};
use fedepth::partition::{partition, size_stats, Family, PartitionSpec};
use fedepth::rng::{rng_for, tag};
use fedepth::trainer::{
    baseline_update, client_update, depthwise_inference, mkd_update, ClientUpdateConfig, FileSpill, MkdConfig,
    SpillStore, StudentInit,
};
use rand::Rng;

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

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("decomposition golden plans", c1_decomposition),
        ("single-group degeneracy", c2_degeneracy),
        ("gradient correctness", c3_gradients),
        ("spilled inference equivalence", c4_inference),
        ("aggregation properties", c5_aggregation),
        ("desk-scale method comparison", c6_method),
        ("partial-training robustness", c7_partial),
        ("mutual distillation sanity", c8_mkd),
        ("memory accounting", c9_memory),
        ("partition statistics", c10_partition),
        ("similarity trend", c11_similarity),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = check();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {:>2} {} {name} ({secs:.1} s): {}",
            i + 1,
            if out.pass { "PASS" } else { "FAIL" },
            out.detail
        );
        failed += usize::from(!out.pass);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn c1_decomposition() -> Outcome {
    let start = Instant::now();
    let costs = [3.0, 2.0, 1.0, 0.5, 0.5, 0.5];
    let plan = |cap| decompose(&costs, &MemoryBudget::new(cap).unwrap()).unwrap().one_based();
    let at3 = plan(3.0);
    let at5 = plan(5.0);
    let reference = preresnet20_reference_plan().one_based();
    let ok = at3 == vec![vec![1], vec![2, 3], vec![4, 5, 6]]
        && at5 == vec![vec![1, 2], vec![3, 4, 5, 6]]
        && reference == vec![vec![1], vec![2], vec![3], vec![4], vec![5, 6], vec![7, 8, 9]]
        && start.elapsed() < Duration::from_secs(1);
    outcome(ok, format!("3 GB {at3:?}, 5 GB {at5:?}, PreResNet-20 {reference:?}"))
}

fn c2_degeneracy() -> Outcome {
    let g = BlockGraph::mlp(8, 32, 3, 4).unwrap();
    let params = g.param_count();
    let (train, _) = GaussianMixture {
        classes: 4,
        dim: 8,
        clusters_per_class: 3,
        separation: 4.0,
    }
    .generate::<f32>(256, 4, 5)
    .unwrap();
    let w = ModelWeights::init(&g, &mut rng_for(5, &[tag::INIT]));
    let cfg = ClientUpdateConfig {
        epochs: 3,
        seed: 5,
        ..Default::default()
    };
    let a = client_update(&g, &w, &DecompositionPlan::whole(3), &train, &cfg).unwrap();
    let b = baseline_update(&g, &w, &train, &cfg).unwrap();
    let diff = a.weights.max_abs_diff(&b.weights);
    outcome(
        params <= 10_000 && diff <= 1e-6,
        format!("{params} params, max |ΔW| = {diff:e}"),
    )
}

/// Central difference of `f` at 0, or `None` when the probe interval
/// straddles a kink: there the second difference is of the order of the
/// gradient jump instead of `eps · f''`. The test never looks at the
/// analytic gradient, so a wrong backward pass cannot hide behind it.
fn central_difference(f: impl Fn(f64) -> f64, eps: f64) -> Option<f64> {
    let (p, z, m) = (f(eps), f(0.0), f(-eps));
    ((p - 2.0 * z + m).abs() / eps <= 1e-3).then(|| (p - m) / (2.0 * eps))
}

/// Worst relative error between analytic and central-difference gradients
/// of the cross-entropy loss, over parameters and the input, and the number
/// of probes dropped at kinks.
fn gradcheck(graph: &BlockGraph, seed: u64) -> (f64, usize) {
    let loss_of = |w: &ModelWeights<f64>, x: &Tensor<f64>, y: &[usize]| {
        let mut tape = Tape::new().with_input_grad();
        let mut h = x.clone();
        for j in 0..graph.num_blocks() {
            h = tape.run_block(graph, &w.body[j], j, &h).unwrap();
        }
        let logits = tape.run(Owner::Head, graph.head(), &w.head, &h).unwrap();
        let l = loss::cross_entropy(&logits, y).unwrap();
        (l, tape)
    };
    let mut rng = rng_for(seed, &[99]);
    let w = ModelWeights::<f64>::init(graph, &mut rng);
    // shift parameters off their initial values so norms and biases are generic
    let mut w = w;
    for t in w.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let batch = 3;
    let mut dims = vec![batch];
    dims.extend_from_slice(graph.input_shape().dims());
    let n: usize = dims.iter().product();
    let xv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_f64(&dims, &xv).unwrap();
    let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..graph.classes())).collect();

    let (root, tape) = loss_of(&w, &x, &y);
    let grads = tape.backward(Params::of(&w), &root).unwrap();
    let eps = 1e-5;
    let rel = |numeric: f64, analytic: f64| (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
    let mut worst = 0.0f64;
    let mut kinks = 0;
    let sets = graph.num_blocks() + 1;
    for set in 0..sets {
        let count = if set < graph.num_blocks() {
            w.body[set].len()
        } else {
            w.head.len()
        };
        for ti in 0..count {
            let analytic = if set < graph.num_blocks() {
                grads.body[&set][ti].clone()
            } else {
                grads.head.as_ref().unwrap()[ti].clone()
            };
            for _ in 0..4 {
                let k = rng.random_range(0..analytic.len());
                let probe = |delta: f64| {
                    let mut m = w.clone();
                    let t = if set < graph.num_blocks() {
                        &mut m.body[set][ti]
                    } else {
                        &mut m.head[ti]
                    };
                    t.data_mut()[k] += delta;
                    loss_of(&m, &x, &y).0.value
                };
                match central_difference(probe, eps) {
                    Some(numeric) => worst = worst.max(rel(numeric, analytic.data()[k])),
                    None => kinks += 1,
                }
            }
        }
    }
    let gx = grads.input.as_ref().unwrap();
    for _ in 0..6 {
        let k = rng.random_range(0..x.len());
        let probe = |delta: f64| {
            let mut xm = x.clone();
            xm.data_mut()[k] += delta;
            loss_of(&w, &xm, &y).0.value
        };
        match central_difference(probe, eps) {
            Some(numeric) => worst = worst.max(rel(numeric, gx.data()[k])),
            None => kinks += 1,
        }
    }
    (worst, kinks)
}

fn one_block(input: &[usize], layers: Vec<LayerSpec>, features: usize) -> BlockGraph {
    BlockGraph::new(
        Shape::new(input.to_vec()).unwrap(),
        vec![Block { layers }],
        vec![LayerSpec::Classifier {
            inputs: features,
            classes: 3,
        }],
    )
    .unwrap()
}

fn layer_cases(i: u64) -> Vec<(&'static str, BlockGraph)> {
    let stride = 1 + (i % 2) as usize;
    let side = (5 + 2 - 3) / stride + 1;
    vec![
        (
            "dense",
            one_block(&[5], vec![LayerSpec::Dense { inputs: 5, outputs: 4 }], 4),
        ),
        (
            "relu",
            one_block(
                &[6],
                vec![LayerSpec::Dense { inputs: 6, outputs: 6 }, LayerSpec::Relu],
                6,
            ),
        ),
        (
            "conv2d",
            one_block(
                &[2, 5, 5],
                vec![
                    LayerSpec::Conv2d {
                        in_channels: 2,
                        out_channels: 3,
                        kernel: 3,
                        stride,
                        padding: 1,
                    },
                    LayerSpec::Flatten,
                ],
                3 * side * side,
            ),
        ),
        (
            "group-norm",
            one_block(
                &[4, 3, 3],
                vec![LayerSpec::GroupNorm { channels: 4, groups: 2 }, LayerSpec::Flatten],
                36,
            ),
        ),
        (
            "avg-pool",
            one_block(
                &[2, 4, 4],
                vec![LayerSpec::AvgPool { window: 2 }, LayerSpec::Flatten],
                8,
            ),
        ),
        (
            "global-avg-pool",
            one_block(&[3, 4, 4], vec![LayerSpec::GlobalAvgPool, LayerSpec::Flatten], 3),
        ),
        ("flatten", one_block(&[2, 3, 3], vec![LayerSpec::Flatten], 18)),
        (
            "zero-pad",
            one_block(
                &[2, 4, 4],
                vec![LayerSpec::ZeroPad { target: vec![3, 2, 2] }, LayerSpec::Flatten],
                12,
            ),
        ),
        (
            "residual",
            one_block(
                &[2, 4, 4],
                vec![
                    LayerSpec::Residual {
                        body: vec![
                            LayerSpec::GroupNorm { channels: 2, groups: 1 },
                            LayerSpec::Relu,
                            LayerSpec::Conv2d {
                                in_channels: 2,
                                out_channels: 4,
                                kernel: 3,
                                stride: 2,
                                padding: 1,
                            },
                        ],
                    },
                    LayerSpec::Flatten,
                ],
                16,
            ),
        ),
        ("classifier", one_block(&[4], vec![LayerSpec::Flatten], 4)),
    ]
}

fn c3_gradients() -> Outcome {
    let kinds = layer_cases(0).len();
    let mut worst = vec![0.0f64; kinds];
    let mut names = Vec::new();
    let mut kinks = 0;
    for i in 0..100u64 {
        for (k, (name, g)) in layer_cases(i).into_iter().enumerate() {
            let (w, dropped) = gradcheck(&g, 1000 + i);
            worst[k] = worst[k].max(w);
            kinks += dropped;
            if i == 0 {
                names.push(name);
            }
        }
    }
    // the distillation loss is the one objective not exercised above
    let mut kl_worst = 0.0f64;
    for i in 0..100u64 {
        let mut rng = rng_for(i, &[98]);
        let mut r = |n| -> Tensor<f64> {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            Tensor::from_f64(&[3, 4], &v).unwrap()
        };
        let (t, s) = (r(12), r(12));
        let out = loss::kl_logits(&t, &s).unwrap();
        for k in 0..s.len() {
            let at = |d: f64| {
                let mut p = s.clone();
                p.data_mut()[k] += d;
                loss::kl_logits(&t, &p).unwrap().value
            };
            let numeric = (at(1e-5) - at(-1e-5)) / 2e-5;
            let a = out.grad.data()[k];
            kl_worst = kl_worst.max((numeric - a).abs() / (numeric.abs() + a.abs()).max(1e-6));
        }
    }
    names.push("kl");
    worst.push(kl_worst);
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let summary: Vec<String> = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    outcome(
        max <= 1e-4,
        format!(
            "100 instances per kind, worst rel. error: {}; {kinks} probes straddling a kink skipped",
            summary.join(", ")
        ),
    )
}

fn c4_inference() -> Outcome {
    let g = BlockGraph::preresnet(&[4, 8, 16], 3, [3, 8, 8], 10).unwrap();
    let w = ModelWeights::<f32>::init(&g, &mut rng_for(4, &[tag::INIT]));
    let dir = tempfile::tempdir().unwrap();
    let mut spill = FileSpill::new(dir.path()).unwrap();
    let mut rng = rng_for(4, &[tag::DATA]);
    let (mut equal, mut total) = (true, 0);
    let blocks = g.num_blocks();
    let mut counts_ok = true;
    for _ in 0..10 {
        let batch = 100;
        let v: Vec<f64> = (0..batch * 3 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::<f32>::from_f64(&[batch, 3, 8, 8], &v).unwrap();
        let before = SpillStore::<f32>::stats(&spill);
        let a = depthwise_inference(&g, &w, &x, &mut spill).unwrap();
        let after = SpillStore::<f32>::stats(&spill);
        let b = predict(&g, &w, &x).unwrap();
        equal &= a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        counts_ok &= after.writes - before.writes == blocks && after.reads - before.reads == blocks - 1;
        total += batch;
    }
    let stats = SpillStore::<f32>::stats(&spill);
    drop(spill);
    let leftover = std::fs::read_dir(dir.path()).unwrap().count();
    outcome(
        equal && counts_ok && blocks == 9 && total == 1000,
        format!(
            "{total} inputs, {blocks} blocks, bitwise equal {equal}, {} writes / {} reads over 10 calls, {leftover} spill files left after drop",
            stats.writes, stats.reads
        ),
    )
}

fn c5_aggregation() -> Outcome {
    let scalar = |v: f64| ModelWeights::<f64> {
        body: vec![vec![Tensor::from_f64(&[1], &[v]).unwrap()]],
        head: vec![],
    };
    let ms = [scalar(6.0), scalar(3.0), scalar(1.0)];
    let refs: Vec<_> = ms.iter().collect();
    let hand = aggregate(&refs, &[1.0, 2.0, 3.0]).unwrap().body[0][0].data()[0];
    let mut ok = (hand - 2.5).abs() <= 1e-12;

    let g = BlockGraph::mlp(4, 6, 3, 3).unwrap();
    let mut worst_hull = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut worst_norm = 0.0f64;
    for trial in 0..200u64 {
        let mut rng = rng_for(trial, &[5]);
        let k = rng.random_range(1..6);
        let ws: Vec<ModelWeights<f64>> = (0..k)
            .map(|m| ModelWeights::init(&g, &mut rng_for(trial, &[tag::INIT, m])))
            .collect();
        let refs: Vec<_> = ws.iter().collect();
        let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..10.0)).collect();
        let c = normalized_coefficients(&p).unwrap();
        worst_norm = worst_norm.max((c.iter().sum::<f64>() - 1.0).abs());
        let agg = aggregate(&refs, &p).unwrap();
        let scale = rng.random_range(1e-3..1e3);
        let scaled: Vec<f64> = p.iter().map(|v| v * scale).collect();
        worst_scale = worst_scale.max(agg.max_abs_diff(&aggregate(&refs, &scaled).unwrap()));
        let flat = |w: &ModelWeights<f64>| w.tensors().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>();
        let inputs: Vec<Vec<f64>> = ws.iter().map(flat).collect();
        for (e, v) in flat(&agg).iter().enumerate() {
            let lo = inputs.iter().map(|x| x[e]).fold(f64::INFINITY, f64::min);
            let hi = inputs.iter().map(|x| x[e]).fold(f64::NEG_INFINITY, f64::max);
            worst_hull = worst_hull.max(lo - v).max(v - hi);
        }
    }
    ok &= worst_hull <= 0.0 && worst_scale <= 1e-12 && worst_norm <= 1e-12;
    outcome(
        ok,
        format!(
            "3-client example {hand}, hull excess {worst_hull:e}, scale drift {worst_scale:e}, Σc − 1 {worst_norm:e}"
        ),
    )
}

/// 20 clients, Dirichlet α(1.0) balanced, 50 rounds, γ = 0.5, budgets that
/// force J ∈ {1, 2, 3, 4} on equal quarters of the clients.
fn fedepth_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.budget.mode = BudgetMode::Groups;
    c.budget.groups = vec![1, 2, 3, 4];
    c.trainer.kind = TrainerName::Fedepth;
    c
}

fn mean_final(cfg: &ExperimentConfig) -> f64 {
    let accs: Vec<f64> = sweep(cfg, &SEEDS)
        .into_iter()
        .map(|r| r.unwrap().final_top1())
        .collect();
    mean(&accs)
}

thread_local! {
    static FEDEPTH_MEAN: std::cell::Cell<Option<f64>> = const { std::cell::Cell::new(None) };
}

fn fedepth_mean() -> f64 {
    FEDEPTH_MEAN.with(|c| {
        *c.get().get_or_insert_with(|| {
            let m = mean_final(&fedepth_config());
            c.set(Some(m));
            m
        })
    })
}

fn c6_method() -> Outcome {
    let fedepth = fedepth_mean();
    let mut full = ExperimentConfig::default();
    full.trainer.kind = TrainerName::Baseline;
    full.budget.mode = BudgetMode::Unconstrained;
    let mut narrow = full.clone();
    narrow.model.width_ratio = 1.0 / 6.0;
    let full = mean_final(&full);
    let narrow = mean_final(&narrow);
    let pts = |v: f64| 100.0 * v;
    outcome(
        pts(fedepth - narrow) >= 3.0 && pts(full - fedepth).abs() <= 3.0,
        format!(
            "5-seed means: FeDepth {:.2}, FedAvg ×1/6 width {:.2}, FedAvg ×1 {:.2}",
            pts(fedepth),
            pts(narrow),
            pts(full)
        ),
    )
}

fn c7_partial() -> Outcome {
    let fedepth = fedepth_mean();
    let mut partial = fedepth_config();
    partial.budget.skip_first_fraction = 0.25;
    partial.trainer.kind = TrainerName::FedepthPartial;
    let partial = mean_final(&partial);
    outcome(
        100.0 * (fedepth - partial).abs() <= 2.0,
        format!(
            "5-seed means: 25% skip block 1 {:.2}, no skip {:.2}",
            100.0 * partial,
            100.0 * fedepth
        ),
    )
}

fn c8_mkd() -> Outcome {
    let base = setup(&fedepth_config()).unwrap();
    let g = &base.graph;
    let whole = DecompositionPlan::whole(g.num_blocks());

    // identical students: both uploads equal plain local training
    let shard = &base.clients[0].data;
    let cfg = ClientUpdateConfig {
        seed: 11,
        ..base.federation.local.clone()
    };
    let plain = client_update(g, &base.initial, &whole, shard, &cfg).unwrap();
    let mut identical = true;
    for upload in 0..2 {
        let mkd = MkdConfig {
            init: StudentInit::Identical,
            upload,
            ..MkdConfig::default()
        };
        let out = mkd_update(g, &base.initial, &whole, shard, &cfg, &mkd).unwrap();
        identical &= out.weights == plain.weights && out.report.kl_by_epoch.iter().all(|&k| k == 0.0);
    }

    // different inits: epoch-mean mutual KL over the whole synthetic train set
    let fresh = MkdConfig {
        init: StudentInit::Fresh,
        ..MkdConfig::default()
    };
    let mut decreasing = 0;
    let mut last_curve = Vec::new();
    for &seed in &SEEDS {
        let cfg = ClientUpdateConfig {
            epochs: 5,
            seed,
            ..base.federation.local.clone()
        };
        let w0 = ModelWeights::init(g, &mut rng_for(seed, &[tag::INIT]));
        let out = mkd_update(g, &w0, &whole, &base.train, &cfg, &fresh).unwrap();
        let kl = out.report.kl_by_epoch;
        decreasing += usize::from(kl.windows(2).all(|w| w[1] < w[0]));
        last_curve = kl;
    }

    // surplus: the lowest-group clients get twice the full-model capacity
    let model = base.federation.local.cost_model();
    let mut caps: Vec<f64> = level_budgets(&base.config, g, &model)
        .unwrap()
        .into_iter()
        .map(|b| b.unwrap().capacity_mb)
        .collect();
    caps[0] *= 2.0;
    let mut surplus = fedepth_config();
    surplus.budget.mode = BudgetMode::Capacity;
    surplus.budget.capacity_mb = caps;
    surplus.trainer.kind = TrainerName::Mkd;
    let surplus = mean_final(&surplus);
    let fedepth = fedepth_mean();

    let curve: Vec<String> = last_curve.iter().map(|k| format!("{k:.4}")).collect();
    outcome(
        identical && decreasing == SEEDS.len() && surplus >= fedepth,
        format!(
            "identical students bit-equal {identical}; KL strictly decreasing in {decreasing}/{} seeds (seed 4: {}); surplus {:.2} vs FeDepth {:.2}",
            SEEDS.len(),
            curve.join(" "),
            100.0 * surplus,
            100.0 * fedepth
        ),
    )
}

fn c9_memory() -> Outcome {
    let g = BlockGraph::preresnet20(10).unwrap();
    let model = CostModel::default();
    let ratios = block_cost_ratios(&g, &model).unwrap();
    // published per-block costs in MB
    let table = [20.02, 20.02, 20.02, 14.05, 10.07, 10.07, 7.21, 5.28, 5.28];
    let errors: Vec<f64> = ratios
        .iter()
        .zip(&table)
        .map(|(r, t)| (r - t / table[0]).abs() / (t / table[0]))
        .collect();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    let tiers = [
        &ratios[0..3],
        &ratios[3..4],
        &ratios[4..6],
        &ratios[6..7],
        &ratios[7..9],
    ];
    let ordered = tiers.windows(2).all(|w| {
        let lo = w[0].iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = w[1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lo > hi
    });
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    outcome(
        worst <= 0.15 && ordered,
        format!(
            "batch {} fp32 momentum {}: ratios to block 1 [{}], worst deviation {:.1}%, ordering {}",
            model.batch,
            model.momentum,
            shown.join(" "),
            100.0 * worst,
            ordered
        ),
    )
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

fn c10_partition() -> Outcome {
    // CIFAR-10 sized labels; 20% held out for validation leaves 40000
    let all: Vec<usize> = (0..50_000).map(|i| i % 10).collect();
    let (kept, _) = stratified_split(&all, 10, 0.2, 0).unwrap();
    let labels: Vec<usize> = kept.iter().map(|&i| all[i]).collect();
    let spec = |family, seed| PartitionSpec {
        family,
        clients: 100,
        seed,
    };
    let unbalanced = Family::DirichletUnbalanced { lambda: 0.3 };
    let std_of = |seed| size_stats(&partition(&labels, 10, &spec(unbalanced, seed)).unwrap());

    let mut mc: Vec<f64> = (1000..1200).map(|s| std_of(s).1).collect();
    mc.sort_by(f64::total_cmp);
    let band = (quantile(&mc, 0.01), quantile(&mc, 0.99));
    let brackets = band.0 <= 150.60 && 150.60 <= band.1;

    let runs: Vec<(f64, f64)> = (0..20).map(std_of).collect();
    let means_ok = runs.iter().all(|(m, _)| (m - 400.0).abs() <= 2.0);
    let stds: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let std_mean = mean(&stds);
    let std_ok = band.0 <= std_mean && std_mean <= band.1;

    let balanced = partition(&labels, 10, &spec(Family::DirichletBalanced { lambda: 0.3 }, 0)).unwrap();
    let sizes: Vec<usize> = balanced.iter().map(|s| s.len()).collect();
    let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
    let patho = partition(&labels, 10, &spec(Family::Pathological { labels_per_client: 2 }, 0)).unwrap();
    let two_labels = patho.iter().all(|s| s.distinct_labels() == 2);

    outcome(
        means_ok && brackets && std_ok && spread <= 1 && two_labels,
        format!(
            "unbalanced λ=0.3: mean {:.1}, std {std_mean:.1} over 20 seeds, MC 1–99% band [{:.1}, {:.1}] (reference 150.60 inside: {brackets}); balanced max−min {spread}; β(2) two labels everywhere {two_labels}",
            runs[0].0, band.0, band.1
        ),
    )
}

fn c11_similarity() -> Outcome {
    let mut wins = 0;
    let mut shown = Vec::new();
    for &seed in &SEEDS {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.seed = seed;
        cfg.partition.family = FamilyName::Pathological;
        cfg.partition.clients = 2;
        cfg.partition.labels_per_client = 2;
        let s = setup(&cfg).unwrap();
        let labels: Vec<Vec<usize>> = s
            .shards
            .iter()
            .map(|sh| (0..4).filter(|&c| sh.histogram[c] > 0).collect())
            .collect();
        assert!(
            labels[0].iter().all(|c| !labels[1].contains(c)),
            "shards must be label-disjoint"
        );
        let local = ClientUpdateConfig {
            epochs: 5,
            ..s.federation.local.clone()
        };
        let whole = DecompositionPlan::whole(s.graph.num_blocks());
        let trained: Vec<ModelWeights<f32>> = s
            .clients
            .iter()
            .map(|c| {
                let cfg = ClientUpdateConfig {
                    seed: fedepth::rng::derive_seed(seed, &[tag::CLIENT, c.id as u64]),
                    ..local.clone()
                };
                client_update(&s.graph, &s.initial, &whole, &c.data, &cfg)
                    .unwrap()
                    .weights
            })
            .collect();
        let n = PROBE_SIZE.min(s.test.len());
        let mut idx = rand::seq::index::sample(&mut rng_for(seed, &[tag::PROBE]), s.test.len(), n).into_vec();
        idx.sort_unstable();
        let (probe, _) = s.test.batch(&idx).unwrap();
        let m = compare_models(&s.graph, ("a", &trained[0]), ("b", &trained[1]), &probe, Measure::Cka).unwrap();
        let d = m.diagonal();
        let (first, last) = (d[0], d[d.len() - 1]);
        wins += usize::from(first > last);
        shown.push(format!("{first:.3}/{last:.3}"));
    }
    outcome(
        wins >= 4,
        format!(
            "first > last block CKA in {wins}/5 seeds (first/last: {})",
            shown.join(", ")
        ),
    )
}
