use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    fingerprint, split_steps, BatchSchedule, ClientOutput, ClientReport, ClientUpdateConfig, EpochLog, GroupLog,
    HeadStrategy, MkdConfig, ScheduleMode, StudentInit, StudentMode,
};
use crate::data::Dataset;
use crate::decomposition::DecompositionPlan;
use crate::error::{Error, Result};
use crate::memory::estimate_training_unit_cost;
use crate::nn::engine::{forward, Activation, Owner, Params, Stage, Tape};
use crate::nn::graph::{default_groups, BlockGraph};
use crate::nn::layer::LayerSpec;
use crate::nn::loss::{cross_entropy, kl_logits, LossOutput};
use crate::nn::optim::Sgd;
use crate::nn::tensor::{Scalar, Shape, Tensor};
use crate::nn::weights::{init_head, ModelWeights};
use crate::rng::{rng_for, tag};

/// Depth-wise sequential local training of one model.
///
/// Groups of `plan` train in order. Each starts from the received body
/// weights and the head produced by the previous group (the received head
/// for the first); blocks before the group run frozen to produce its input.
/// Skipped-prefix blocks are never updated. The returned model is full size.
pub fn client_update<T: Scalar>(
    graph: &BlockGraph,
    global: &ModelWeights<T>,
    plan: &DecompositionPlan,
    data: &Dataset<T>,
    cfg: &ClientUpdateConfig,
) -> Result<ClientOutput<T>> {
    let student = Student::new(graph, global.clone(), plan, data, cfg)?;
    let (mut weights, report) = run(graph, data, cfg, vec![student], 0.0, 0)?;
    Ok(ClientOutput {
        weights: weights.swap_remove(0),
        report,
    })
}

/// Mutual knowledge distillation between `mkd.students` local models.
///
/// Student `m` minimizes its cross-entropy plus
/// `weight / (M - 1) · Σ_{m' ≠ m} KL(h^{m'} ‖ h^m)` with the other students'
/// logits held constant. All students see the same minibatches. Plain
/// students train the whole model as one group; depth-wise students follow
/// `plan`. Only student `mkd.upload` is returned.
pub fn mkd_update<T: Scalar>(
    graph: &BlockGraph,
    global: &ModelWeights<T>,
    plan: &DecompositionPlan,
    data: &Dataset<T>,
    cfg: &ClientUpdateConfig,
    mkd: &MkdConfig,
) -> Result<ClientOutput<T>> {
    mkd.validate()?;
    let whole = DecompositionPlan::whole(graph.num_blocks());
    let students = (0..mkd.students)
        .map(|m| {
            let init = if m == 0 {
                global.clone()
            } else {
                match mkd.init {
                    StudentInit::Identical => global.clone(),
                    StudentInit::Perturbed { scale } => {
                        let mut w = global.clone();
                        let mut rng = rng_for(cfg.seed, &[tag::STUDENT, m as u64]);
                        for t in w.tensors_mut() {
                            for v in t.data_mut() {
                                *v = *v + T::of(scale * rng.sample::<f64, _>(StandardNormal));
                            }
                        }
                        w
                    }
                    StudentInit::Fresh => ModelWeights::init(graph, &mut rng_for(cfg.seed, &[tag::STUDENT, m as u64])),
                }
            };
            let p = match mkd.mode(m) {
                StudentMode::Plain => &whole,
                StudentMode::DepthWise => plan,
            };
            Student::new(graph, init, p, data, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut weights, report) = run(graph, data, cfg, students, mkd.weight, mkd.upload)?;
    Ok(ClientOutput {
        weights: weights.swap_remove(mkd.upload),
        report,
    })
}

/// Ordinary whole-model local SGD, written as its own loop so it can serve
/// as a reference for the depth-wise trainer.
pub fn baseline_update<T: Scalar>(
    graph: &BlockGraph,
    global: &ModelWeights<T>,
    data: &Dataset<T>,
    cfg: &ClientUpdateConfig,
) -> Result<ClientOutput<T>> {
    cfg.validate()?;
    global.validate(graph)?;
    if data.is_empty() {
        return Err(Error::usage("client has no training samples"));
    }
    let mut w = global.clone();
    let mut body_opt: Vec<Sgd<T>> = (0..graph.num_blocks()).map(|_| Sgd::new(cfg.sgd)).collect();
    let mut head_opt = Sgd::new(cfg.sgd);
    let schedule = BatchSchedule::new(data.len(), cfg.batch_size, cfg.seed);
    let mut report = ClientReport::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = schedule.batches(epoch);
        for idx in &batches {
            let (x, y) = data.batch(idx)?;
            let mut tape = Tape::new();
            let mut h = x;
            for j in 0..graph.num_blocks() {
                h = tape.run_block(graph, &w.body[j], j, &h)?;
            }
            let logits = tape.run(Owner::Head, graph.head(), &w.head, &h)?;
            let loss = cross_entropy(&logits, &y)?;
            check_loss(loss.value, "whole model")?;
            total += loss.value;
            let grads = tape.backward(Params::of(&w), &loss)?;
            report.backward_passes += 1;
            for (j, g) in grads.body {
                report.body_param_visits += g.iter().map(Tensor::len).sum::<usize>();
                body_opt[j].step(&mut w.body[j], &g, &format!("block {}", j + 1))?;
            }
            let g = grads.head.expect("head is on the tape");
            report.head_param_visits += g.iter().map(Tensor::len).sum::<usize>();
            head_opt.step(&mut w.head, &g, "head")?;
        }
        report.epochs.push(EpochLog {
            group: 1,
            epoch,
            steps: batches.len(),
            loss: total / batches.len() as f64,
            lr: cfg.sgd.lr,
            peak_mb: 0.0,
        });
    }
    Ok(ClientOutput { weights: w, report })
}

fn check_loss(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("loss of {what}")))
    }
}

/// Auxiliary classifier for a group whose output has per-sample `shape`.
fn aux_head(shape: &Shape, classes: usize) -> Result<Vec<LayerSpec>> {
    let c = shape.dims()[0];
    let norm = LayerSpec::GroupNorm {
        channels: c,
        groups: default_groups(c),
    };
    let classifier = LayerSpec::Classifier { inputs: c, classes };
    match shape.rank() {
        1 => Ok(vec![norm, LayerSpec::Relu, classifier]),
        3 => Ok(vec![norm, LayerSpec::Relu, LayerSpec::GlobalAvgPool, classifier]),
        _ => Err(Error::structure(format!("no auxiliary head for {shape:?}"))),
    }
}

struct GroupSpec {
    range: Range<usize>,
    /// Step positions; position `p` is minibatch `p mod B` of epoch `p div B`.
    positions: Vec<usize>,
    unit_mb: f64,
    buffer_mb: f64,
}

struct Active<T> {
    index: usize,
    main_head: bool,
    head_layers: Vec<LayerSpec>,
    head: Vec<Tensor<T>>,
    body_opt: Vec<Sgd<T>>,
    head_opt: Sgd<T>,
    buffer: Option<Tensor<T>>,
    head_in: u32,
    steps: usize,
}

struct Student<T> {
    weights: ModelWeights<T>,
    groups: Vec<GroupSpec>,
    active: Option<Active<T>>,
    group_logs: Vec<GroupLog>,
    buffer_allowed: Vec<bool>,
}

impl<T: Scalar> Student<T> {
    fn new(
        graph: &BlockGraph,
        weights: ModelWeights<T>,
        plan: &DecompositionPlan,
        data: &Dataset<T>,
        cfg: &ClientUpdateConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate(graph)?;
        plan.validate(graph.num_blocks())?;
        if data.is_empty() {
            return Err(Error::usage("client has no training samples"));
        }
        if data.sample_shape() != *graph.input_shape() {
            return Err(Error::structure(format!(
                "data samples {:?} do not match model input {:?}",
                data.sample_shape(),
                graph.input_shape()
            )));
        }
        let per_epoch = data.len().div_ceil(cfg.batch_size);
        let total = cfg.epochs * per_epoch;
        let counts = match cfg.schedule {
            ScheduleMode::SplitSteps => split_steps(total, plan.num_groups()),
            ScheduleMode::FullPerGroup => vec![total; plan.num_groups()],
        };
        let model = cfg.cost_model();
        let mut next = 0;
        let groups = plan
            .groups
            .iter()
            .zip(counts)
            .map(|(r, n)| {
                let positions = match cfg.schedule {
                    ScheduleMode::SplitSteps => (next..next + n).collect(),
                    ScheduleMode::FullPerGroup => (0..n).collect(),
                };
                next += n;
                let buffer_elems = data.len() * graph.block_input_shape(r.start).numel();
                Ok(GroupSpec {
                    range: r.clone(),
                    positions,
                    unit_mb: estimate_training_unit_cost(graph, r.clone(), &model)?.total_mb,
                    buffer_mb: (buffer_elems * model.bytes_per_element) as f64 / crate::memory::BYTES_PER_MB,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Student {
            weights,
            buffer_allowed: vec![false; groups.len()],
            groups,
            active: None,
            group_logs: Vec::new(),
        })
    }

    fn max_unit(&self) -> f64 {
        self.groups.iter().map(|g| g.unit_mb).fold(0.0, f64::max)
    }

    fn steps(&self) -> Vec<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(j, g)| g.positions.iter().map(move |&p| (j, p)))
            .collect()
    }

    fn start_group(&mut self, j: usize, graph: &BlockGraph, data: &Dataset<T>, cfg: &ClientUpdateConfig) -> Result<()> {
        let spec = &self.groups[j];
        let last = j + 1 == self.groups.len();
        let main_head = cfg.head == HeadStrategy::SkipConnection || last;
        let (head_layers, head) = if main_head {
            (graph.head().to_vec(), self.weights.head.clone())
        } else {
            let shape = graph.block_output_shape(spec.range.end - 1);
            let layers = aux_head(shape, graph.classes())?;
            let params = init_head(&layers, &mut rng_for(cfg.seed, &[tag::AUX_HEAD, j as u64]));
            (layers, params)
        };
        let start = spec.range.start;
        let buffer = if self.buffer_allowed[j] && start > 0 {
            let mut parts = Vec::new();
            let all: Vec<usize> = (0..data.len()).collect();
            for chunk in all.chunks(cfg.batch_size) {
                let (x, _) = data.batch(chunk)?;
                parts.push(forward(graph, &self.weights, &Activation::input(x), Stage::Block(start - 1))?.values);
            }
            Some(Tensor::concat_rows(&parts)?)
        } else {
            None
        };
        self.active = Some(Active {
            index: j,
            main_head,
            head_layers,
            head,
            body_opt: spec.range.clone().map(|_| Sgd::new(cfg.sgd)).collect(),
            head_opt: Sgd::new(cfg.sgd),
            buffer,
            head_in: fingerprint(&self.weights.head),
            steps: 0,
        });
        Ok(())
    }

    fn finish_group(&mut self) {
        if let Some(a) = self.active.take() {
            if a.main_head {
                self.weights.head = a.head;
            }
            let spec = &self.groups[a.index];
            self.group_logs.push(GroupLog {
                group: a.index + 1,
                blocks: (spec.range.start + 1..=spec.range.end).collect(),
                steps: a.steps,
                buffered: a.buffer.is_some(),
                head_in: a.head_in,
                head_out: fingerprint(&self.weights.head),
                unit_mb: spec.unit_mb,
            });
        }
    }

    /// Make group `j` the active one, closing earlier groups.
    fn advance_to(&mut self, j: usize, graph: &BlockGraph, data: &Dataset<T>, cfg: &ClientUpdateConfig) -> Result<()> {
        let current = self.active.as_ref().map(|a| a.index);
        if current == Some(j) {
            return Ok(());
        }
        let from = current.map_or(0, |c| c + 1);
        self.finish_group();
        for k in from..j {
            self.start_group(k, graph, data, cfg)?;
            self.finish_group();
        }
        self.start_group(j, graph, data, cfg)
    }

    fn finish_all(&mut self, graph: &BlockGraph, data: &Dataset<T>, cfg: &ClientUpdateConfig) -> Result<()> {
        let from = self.active.as_ref().map_or(self.group_logs.len(), |a| a.index + 1);
        self.finish_group();
        for k in from..self.groups.len() {
            self.start_group(k, graph, data, cfg)?;
            self.finish_group();
        }
        Ok(())
    }

    /// Record the active group's forward pass on minibatch `idx`.
    fn logits(&self, graph: &BlockGraph, data: &Dataset<T>, idx: &[usize]) -> Result<(Tape<T>, Tensor<T>)> {
        let a = self.active.as_ref().expect("an active group");
        let range = &self.groups[a.index].range;
        let z = match &a.buffer {
            Some(buf) => buf.gather_rows(idx)?,
            None => {
                let (x, _) = data.batch(idx)?;
                if range.start == 0 {
                    x
                } else {
                    forward(
                        graph,
                        &self.weights,
                        &Activation::input(x),
                        Stage::Block(range.start - 1),
                    )?
                    .values
                }
            }
        };
        let mut tape = Tape::new();
        let mut h = z;
        for j in range.clone() {
            h = tape.run_block(graph, &self.weights.body[j], j, &h)?;
        }
        if a.main_head {
            h = tape.run_adapter(&h, graph.head_input_shape())?;
        }
        let logits = tape.run(Owner::Head, &a.head_layers, &a.head, &h)?;
        Ok((tape, logits))
    }

    fn update(&mut self, tape: &Tape<T>, loss: &LossOutput<T>, report: Option<&mut ClientReport>) -> Result<()> {
        let a = self.active.as_mut().expect("an active group");
        let grads = tape.backward(
            Params {
                body: &self.weights.body,
                head: &a.head,
            },
            loss,
        )?;
        let start = self.groups[a.index].range.start;
        let mut body_visits = 0;
        for (j, g) in grads.body {
            body_visits += g.iter().map(Tensor::len).sum::<usize>();
            a.body_opt[j - start].step(&mut self.weights.body[j], &g, &format!("block {}", j + 1))?;
        }
        let g = grads.head.expect("head is on the tape");
        let head_visits = g.iter().map(Tensor::len).sum::<usize>();
        a.head_opt.step(&mut a.head, &g, "head")?;
        a.steps += 1;
        if let Some(r) = report {
            r.backward_passes += 1;
            r.body_param_visits += body_visits;
            r.head_param_visits += head_visits;
        }
        Ok(())
    }
}

/// Train `students` in lockstep on shared minibatches. `report_for` selects
/// whose logs are reported.
fn run<T: Scalar>(
    graph: &BlockGraph,
    data: &Dataset<T>,
    cfg: &ClientUpdateConfig,
    mut students: Vec<Student<T>>,
    kl_weight: f64,
    report_for: usize,
) -> Result<(Vec<ModelWeights<T>>, ClientReport)> {
    let steps: Vec<Vec<(usize, usize)>> = students.iter().map(Student::steps).collect();
    let positions = |s: &Vec<(usize, usize)>| s.iter().map(|p| p.1).collect::<Vec<_>>();
    if steps.iter().any(|s| positions(s) != positions(&steps[0])) {
        return Err(Error::usage("co-trained students must share one minibatch sequence"));
    }
    let baseline: f64 = students.iter().map(Student::max_unit).sum();
    if let Some(b) = &cfg.budget {
        if baseline > b.capacity_mb {
            return Err(Error::usage(format!(
                "training units need {baseline:.4} MB, budget is {:.4} MB",
                b.capacity_mb
            )));
        }
    }
    let mut peak = baseline;
    if cfg.buffer_activations {
        for m in 0..students.len() {
            let others = baseline - students[m].max_unit();
            let own = students[m].max_unit();
            let mut worst = own;
            for j in 0..students[m].groups.len() {
                let g = &students[m].groups[j];
                let need = g.unit_mb + g.buffer_mb;
                let ok = g.range.start > 0 && cfg.budget.is_none_or(|b| others + need <= b.capacity_mb);
                students[m].buffer_allowed[j] = ok;
                if ok {
                    worst = worst.max(need);
                }
            }
            peak += worst - own;
        }
    }

    let schedule = BatchSchedule::new(data.len(), cfg.batch_size, cfg.seed);
    let per_epoch = schedule.per_epoch();
    let m_count = students.len();
    let mut report = ClientReport {
        peak_mb: peak,
        ..Default::default()
    };
    let mut cached: Option<(usize, Vec<Vec<usize>>)> = None;
    let mut log_key: Option<(usize, usize)> = None;
    let mut log_acc = (0.0, 0usize);
    let mut kl_acc: Vec<(f64, usize)> = Vec::new();
    let flush = |report: &mut ClientReport, key: Option<(usize, usize)>, acc: (f64, usize)| {
        if let Some((group, epoch)) = key {
            report.epochs.push(EpochLog {
                group: group + 1,
                epoch,
                steps: acc.1,
                loss: acc.0 / acc.1 as f64,
                lr: cfg.sgd.lr,
                peak_mb: peak,
            });
        }
    };

    for (s, &(_, pos)) in steps[0].iter().enumerate() {
        let (epoch, b) = (pos / per_epoch, pos % per_epoch);
        if cached.as_ref().is_none_or(|c| c.0 != epoch) {
            cached = Some((epoch, schedule.batches(epoch)));
        }
        let idx = &cached.as_ref().expect("cached epoch").1[b];
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();

        let mut tapes = Vec::with_capacity(m_count);
        let mut logits = Vec::with_capacity(m_count);
        for (m, st) in students.iter_mut().enumerate() {
            st.advance_to(steps[m][s].0, graph, data, cfg)?;
            let (tape, l) = st.logits(graph, data, idx)?;
            tapes.push(tape);
            logits.push(l);
        }
        let mut pair_kl = 0.0;
        for m in 0..m_count {
            let mut loss = cross_entropy(&logits[m], &labels)?;
            if m_count > 1 {
                let w = kl_weight / (m_count - 1) as f64;
                for other in (0..m_count).filter(|&o| o != m) {
                    let kl = kl_logits(&logits[other], &logits[m])?;
                    pair_kl += kl.value;
                    loss = loss.add_scaled(&kl, w)?;
                }
            }
            check_loss(loss.value, &format!("group {}", steps[m][s].0 + 1))?;
            if m == report_for {
                let key = Some((steps[m][s].0, epoch));
                if key != log_key {
                    flush(&mut report, log_key, log_acc);
                    log_key = key;
                    log_acc = (0.0, 0);
                }
                log_acc.0 += loss.value;
                log_acc.1 += 1;
            }
            let r = (m == report_for).then_some(&mut report);
            students[m].update(&tapes[m], &loss, r)?;
        }
        if m_count > 1 {
            let slot = s / per_epoch;
            if kl_acc.len() <= slot {
                kl_acc.resize(slot + 1, (0.0, 0));
            }
            kl_acc[slot].0 += pair_kl / (m_count * (m_count - 1)) as f64;
            kl_acc[slot].1 += 1;
        }
    }
    flush(&mut report, log_key, log_acc);
    report.kl_by_epoch = kl_acc.into_iter().map(|(v, n)| v / n as f64).collect();

    for st in &mut students {
        st.finish_all(graph, data, cfg)?;
    }
    report.groups = std::mem::take(&mut students[report_for].group_logs);
    Ok((students.into_iter().map(|s| s.weights).collect(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GaussianMixture;
    use crate::nn::optim::SgdConfig;

    fn setup() -> (BlockGraph, ModelWeights<f32>, Dataset<f32>) {
        let g = BlockGraph::mlp(4, 8, 3, 3).unwrap();
        let w = ModelWeights::init(&g, &mut rng_for(1, &[]));
        let (d, _) = GaussianMixture {
            classes: 3,
            dim: 4,
            clusters_per_class: 2,
            separation: 4.0,
        }
        .generate(50, 10, 2)
        .unwrap();
        (g, w, d)
    }

    fn cfg() -> ClientUpdateConfig {
        ClientUpdateConfig {
            epochs: 3,
            batch_size: 8,
            sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.5,
                weight_decay: 1e-4,
            },
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn single_group_matches_baseline_bitwise() {
        let (g, w, d) = setup();
        let a = client_update(&g, &w, &DecompositionPlan::whole(3), &d, &cfg()).unwrap();
        let b = baseline_update(&g, &w, &d, &cfg()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.report.backward_passes, b.report.backward_passes);
    }

    #[test]
    fn skipped_prefix_is_untouched() {
        let (g, w, d) = setup();
        let plan = DecompositionPlan::from_one_based(2, &[&[3]]).unwrap();
        let out = client_update(&g, &w, &plan, &d, &cfg()).unwrap();
        assert_eq!(out.weights.body[0], w.body[0]);
        assert_eq!(out.weights.body[1], w.body[1]);
        assert_ne!(out.weights.body[2], w.body[2]);
    }

    #[test]
    fn buffering_does_not_change_results() {
        let (g, w, d) = setup();
        let plan = DecompositionPlan::from_one_based(0, &[&[1], &[2], &[3]]).unwrap();
        let plain = client_update(&g, &w, &plan, &d, &cfg()).unwrap();
        let buffered = client_update(
            &g,
            &w,
            &plan,
            &d,
            &ClientUpdateConfig {
                buffer_activations: true,
                ..cfg()
            },
        )
        .unwrap();
        assert_eq!(plain.weights, buffered.weights);
        assert!(buffered.report.groups[1].buffered);
        assert!(!buffered.report.groups[0].buffered);
    }

    #[test]
    fn head_is_handed_from_group_to_group() {
        let (g, w, d) = setup();
        let plan = DecompositionPlan::from_one_based(0, &[&[1], &[2, 3]]).unwrap();
        let out = client_update(&g, &w, &plan, &d, &cfg()).unwrap();
        let groups = &out.report.groups;
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].head_in, fingerprint(&w.head));
        assert_eq!(groups[1].head_in, groups[0].head_out);
        assert_eq!(groups[1].head_out, fingerprint(&out.weights.head));
    }

    #[test]
    fn auxiliary_heads_leave_shared_head_to_last_group() {
        let (g, w, d) = setup();
        let plan = DecompositionPlan::from_one_based(0, &[&[1], &[2], &[3]]).unwrap();
        let c = ClientUpdateConfig {
            head: HeadStrategy::AuxiliaryClassifier,
            ..cfg()
        };
        let out = client_update(&g, &w, &plan, &d, &c).unwrap();
        let groups = &out.report.groups;
        assert_eq!(groups[0].head_out, fingerprint(&w.head));
        assert_eq!(groups[1].head_out, fingerprint(&w.head));
        assert_ne!(groups[2].head_out, fingerprint(&w.head));
        assert!(out.weights.all_finite());
    }

    #[test]
    fn step_budget_is_shared() {
        let (g, w, d) = setup();
        let plan = DecompositionPlan::from_one_based(0, &[&[1], &[2], &[3]]).unwrap();
        let out = client_update(&g, &w, &plan, &d, &cfg()).unwrap();
        let whole = baseline_update(&g, &w, &d, &cfg()).unwrap();
        assert_eq!(out.report.backward_passes, whole.report.backward_passes);
        let steps: Vec<usize> = out.report.groups.iter().map(|g| g.steps).collect();
        assert_eq!(steps, split_steps(21, 3));
    }

    #[test]
    fn empty_shard_and_mismatched_plan_are_rejected() {
        let (g, w, d) = setup();
        let bad = DecompositionPlan::from_one_based(0, &[&[1, 2]]).unwrap();
        assert!(matches!(
            client_update(&g, &w, &bad, &d, &cfg()),
            Err(Error::Structure(_))
        ));
        let empty = Dataset::<f32> {
            inputs: d.inputs.clone(),
            labels: Vec::new(),
            classes: 3,
        };
        assert!(matches!(
            client_update(&g, &w, &DecompositionPlan::whole(3), &empty, &cfg()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn over_budget_plan_is_rejected() {
        let (g, w, d) = setup();
        let c = ClientUpdateConfig {
            budget: Some(crate::memory::MemoryBudget::new(1e-6).unwrap()),
            ..cfg()
        };
        assert!(matches!(
            client_update(&g, &w, &DecompositionPlan::whole(3), &d, &c),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn single_student_mkd_is_plain_training() {
        let (g, w, d) = setup();
        let mkd = MkdConfig {
            students: 1,
            ..Default::default()
        };
        let a = mkd_update(&g, &w, &DecompositionPlan::whole(3), &d, &cfg(), &mkd).unwrap();
        let b = client_update(&g, &w, &DecompositionPlan::whole(3), &d, &cfg()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert!(a.report.kl_by_epoch.is_empty());
    }

    #[test]
    fn identical_students_stay_identical() {
        let (g, w, d) = setup();
        let mkd = MkdConfig {
            students: 2,
            init: StudentInit::Identical,
            upload: 1,
            ..Default::default()
        };
        let a = mkd_update(&g, &w, &DecompositionPlan::whole(3), &d, &cfg(), &mkd).unwrap();
        let b = client_update(&g, &w, &DecompositionPlan::whole(3), &d, &cfg()).unwrap();
        assert!(a.report.kl_by_epoch.iter().all(|&k| k == 0.0));
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn zero_students_is_a_usage_error() {
        let (g, w, d) = setup();
        let mkd = MkdConfig {
            students: 0,
            ..Default::default()
        };
        assert!(matches!(
            mkd_update(&g, &w, &DecompositionPlan::whole(3), &d, &cfg(), &mkd),
            Err(Error::Usage(_))
        ));
    }
}
