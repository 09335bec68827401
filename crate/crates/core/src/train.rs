//! The training loop: balanced batches through the sample and proxy towers,
//! accumulation, fused-proxy loss, optimizer, paging, evaluation and run
//! artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use serde::Serialize;

use crate::autograd::{Var, L2_NORM_EPS};
use crate::checkpoint;
use crate::config::{DataSource, ExperimentConfig, PretrainConfig};
use crate::data::{
    augment, eval_transform, generate_synthetic, load_image_folder, substream, BalancedSampler,
    Dataset,
};
use crate::error::{Error, Result};
use crate::eval::{RetrievalIndex, RetrievalMetrics};
use crate::image::Image;
use crate::loss::{proxy_anchor_loss, training_loss};
use crate::optim::{self, Moments, OptimConfig};
use crate::paging::{ClassEntry, ClassPromptStore, PagingCounters};
use crate::params::{Binder, ParamGroup};
use crate::peft::apply_method;
use crate::proxy::{
    accumulate_batch, assemble_semantic, class_prompt_name, generate_proxy, register_params,
    GruVars, ProxyState, PROXY_BIAS, PROXY_FUSED, PROXY_SEMANTIC,
};
use crate::tensor::Tensor;
use crate::vit::{
    count_params, insert_linear, xavier, ExtraStore, LinearNames, ParamCount, VitModel,
};

pub const METRICS_HEADER: &str = "step,loss,grad_norm,page_ins,step_ms";
pub const EVAL_HEADER: &str = "step,R@1,R@2,R@4,MAP@R";
pub const MODEL_FILE: &str = "model.vpck";
pub const OPTIMIZER_FILE: &str = "optimizer.vpck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";

const EVAL_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepTimings {
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub optimizer_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    /// Steps completed after this one.
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub page_ins: u64,
    pub timings: StepTimings,
    /// Gradient norm of every parameter that received a gradient.
    pub grad_norms: IndexMap<String, f64>,
}

impl StepReport {
    pub fn grad_norm_of(&self, name: &str) -> f64 {
        self.grad_norms.get(name).copied().unwrap_or(0.0)
    }
}

/// Decoded and augmented inputs of one step.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub step: u64,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub images: Vec<Image>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub reports: Vec<StepReport>,
    pub evals: Vec<(u64, RetrievalMetrics)>,
    pub params: ParamCount,
    pub peak_resident_bytes: usize,
}

impl RunSummary {
    pub fn final_metrics(&self) -> Option<RetrievalMetrics> {
        self.evals.last().map(|e| e.1)
    }

    pub fn median_step_ms(&self) -> f64 {
        let mut t: Vec<f64> = self.reports.iter().map(|r| r.timings.total_ms).collect();
        if t.is_empty() {
            return 0.0;
        }
        t.sort_by(f64::total_cmp);
        t[t.len() / 2]
    }
}

/// Train and evaluation splits named by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let all = match cfg.data.source {
        DataSource::Synthetic => generate_synthetic(&cfg.data.synthetic, cfg.data.seed)?,
        DataSource::Folder => {
            let path = cfg
                .data
                .path
                .as_deref()
                .ok_or_else(|| Error::config("data.path", "missing"))?;
            load_image_folder(Path::new(path))?
        }
    };
    if cfg.data.holdout_per_class > 0 {
        return all.holdout(cfg.data.holdout_per_class);
    }
    let k = cfg.data.train_classes.unwrap_or(all.classes.div_ceil(2));
    all.split(k)
}

/// Fresh encoder from `run.seed`, warmed up as a classifier when
/// `pretrain.steps > 0`.
pub fn build_model(cfg: &ExperimentConfig) -> Result<VitModel<f32>> {
    let mut model = VitModel::new(cfg.model.clone(), &mut substream(cfg.run.seed, &[100]))?;
    if cfg.pretrain.steps > 0 {
        pretrain_classifier(&mut model, &cfg.pretrain, &cfg.optim)?;
    }
    Ok(model)
}

/// Supervised warm-up of every encoder parameter with a temporary linear
/// classifier on the sample head's output; images enter unaugmented.
/// Trainable flags are restored and the classifier removed afterwards.
/// Returns the per-step cross-entropy.
pub fn pretrain_classifier(
    model: &mut VitModel<f32>,
    cfg: &PretrainConfig,
    optim_cfg: &OptimConfig,
) -> Result<Vec<f64>> {
    let data = generate_synthetic(&cfg.synthetic, cfg.seed)?;
    let size = model.config().image_size;
    let images: Vec<Image> = data
        .items
        .iter()
        .map(|i| eval_transform(&i.image, size))
        .collect::<Result<_>>()?;
    let classes = data.classes;
    let names = LinearNames::new("pretrain.classifier");
    let out_dim = model.config().head_out_dim;
    let w = xavier(&mut substream(cfg.seed, &[31]), out_dim, classes)?;
    insert_linear(&mut model.store, &names, w, ParamGroup::Encoder)?;
    let flags: Vec<(String, bool)> = model
        .store
        .iter()
        .map(|(n, p)| (n.clone(), p.trainable))
        .collect();
    model.store.iter_mut().for_each(|(_, p)| p.trainable = true);

    let mut moments: IndexMap<String, Moments> = IndexMap::new();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let batch = cfg.batch_size.min(images.len());
    let head = model.sample_head().clone();
    for step in 0..cfg.steps {
        let picks =
            rand::seq::index::sample(&mut substream(cfg.seed, &[30, step]), images.len(), batch);
        let mut b = Binder::<f32>::new(true);
        let enc = model.encoder_prompts(&mut b)?;
        let mut rows = Vec::with_capacity(batch);
        let mut onehot = vec![0.0f32; batch * classes];
        for (r, i) in picks.iter().enumerate() {
            let tokens = model.patchify(&mut b, &images[i])?;
            let cls = model.encode(&mut b, tokens, &enc)?;
            let h = model.head(&mut b, cls, &head)?;
            rows.push(model.linear(&mut b, h, &names)?);
            onehot[r * classes + data.items[i].label] = 1.0;
        }
        let logits = b.graph.concat(&rows, 0)?;
        let logp = b.graph.log_softmax(logits, 1)?;
        let target = b.graph.constant(Tensor::new(&[batch, classes], onehot)?);
        let picked = b.graph.mul(logp, target)?;
        let total = b.graph.sum_all(picked)?;
        let loss = b.graph.scale(total, -1.0 / batch as f64)?;
        let value = b.graph.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        b.graph.backward(loss)?;
        losses.push(value);
        let updates: Vec<(String, Vec<f32>)> = model
            .store
            .names()
            .filter_map(|n| b.grad(n).map(|g| (n.clone(), g.to_vec())))
            .collect();
        for (name, grad) in updates {
            let st = moments.entry(name.clone()).or_default();
            let p = model.store.get_mut(&name).expect("bound parameter exists");
            optim::update(p.value.data_mut(), &grad, st, cfg.lr, optim_cfg);
        }
    }

    model.store.remove(&names.weight);
    model.store.remove(&names.bias);
    for (n, t) in flags {
        if let Some(p) = model.store.get_mut(&n) {
            p.trainable = t;
        }
    }
    Ok(losses)
}

/// Unit-norm sample-tower embeddings of every item, without augmentation.
pub fn embed_dataset(model: &VitModel<f32>, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let size = model.config().image_size;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.items.chunks(EVAL_CHUNK) {
        let mut b = Binder::<f32>::new(false);
        let enc = model.encoder_prompts(&mut b)?;
        for item in chunk {
            let img = eval_transform(&item.image, size)?;
            let e = model.embed(&mut b, &img, &enc)?;
            out.push(b.graph.value(e).to_f64_vec());
        }
    }
    Ok(out)
}

pub fn evaluate_model(model: &VitModel<f32>, data: &Dataset) -> Result<RetrievalMetrics> {
    let rows = embed_dataset(model, data)?;
    Ok(RetrievalIndex::new(rows, data.labels())?.report())
}

pub struct Trainer {
    cfg: ExperimentConfig,
    pub model: VitModel<f32>,
    pub proxy: ProxyState,
    pub prompts: ClassPromptStore,
    pub moments: IndexMap<String, Moments>,
    train: Arc<Dataset>,
    eval: Arc<Dataset>,
    sampler: Arc<BalancedSampler>,
    step: u64,
}

impl Trainer {
    /// Applies the fine-tuning method to `model`, registers the proxy
    /// parameters and class prompts, and sets up the sampler.
    pub fn new(
        cfg: ExperimentConfig,
        mut model: VitModel<f32>,
        train: Dataset,
        eval: Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.run.seed;
        apply_method(&mut model, &cfg.peft, &mut substream(seed, &[101]))?;
        let (d, d_out) = (cfg.model.hidden_dim, cfg.model.head_out_dim);
        register_params(
            &mut model.store,
            &cfg.proxy,
            d,
            d_out,
            train.classes,
            &mut substream(seed, &[102]),
        )?;
        let proxy = ProxyState::new(model.store.value(PROXY_BIAS)?)?;
        let (layers, m) = if cfg.proxy.uses_class_prompts() {
            (cfg.proxy.cls_l, cfg.proxy.m)
        } else {
            (0, 0)
        };
        let prompts = ClassPromptStore::new(
            train.classes,
            layers,
            m,
            d,
            cfg.model.prompt_init_range(),
            cfg.run.buffer_capacity,
            &mut substream(seed, &[103]),
        )?;
        let sampler = BalancedSampler::new(
            &train.labels(),
            cfg.data.batch_size,
            cfg.data.per_class,
            seed,
        )?;
        Ok(Trainer {
            cfg,
            model,
            proxy,
            prompts,
            moments: IndexMap::new(),
            train: Arc::new(train),
            eval: Arc::new(eval),
            sampler: Arc::new(sampler),
            step: 0,
        })
    }

    /// Datasets and encoder straight from the config.
    pub fn from_config(cfg: ExperimentConfig) -> Result<Self> {
        let (train, eval) = load_datasets(&cfg)?;
        let model = build_model(&cfg)?;
        Trainer::new(cfg, model, train, eval)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn eval_set(&self) -> &Dataset {
        &self.eval
    }

    pub fn paging(&self) -> PagingCounters {
        self.prompts.counters()
    }

    pub fn param_count(&self) -> ParamCount {
        count_params(
            &self.model.store,
            &[ExtraStore {
                elements: self.prompts.elements(),
                tunable: true,
            }],
        )
    }

    /// Parameters, optimizer moments and the peak class-prompt residency.
    pub fn peak_resident_bytes(&self) -> usize {
        let params: usize = self
            .model
            .store
            .iter()
            .map(|(_, p)| p.value.len() * 4)
            .sum();
        let moments: usize = self.moments.values().map(Moments::bytes).sum();
        params + moments + self.prompts.counters().peak_resident_bytes
    }

    pub fn prepare_batch(&self, step: u64) -> Result<PreparedBatch> {
        prepare(&self.train, &self.sampler, &self.cfg, step)
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let batch = self.prepare_batch(self.step)?;
        self.train_step_prepared(batch)
    }

    /// One optimization step on a batch prepared for the current step.
    pub fn train_step_prepared(&mut self, batch: PreparedBatch) -> Result<StepReport> {
        if batch.step != self.step {
            return Err(Error::Data(format!(
                "batch for step {} fed at step {}",
                batch.step, self.step
            )));
        }
        let start = Instant::now();
        let labels = &batch.labels;
        let mut classes: Vec<usize> = Vec::new();
        for &l in labels {
            if !classes.contains(&l) {
                classes.push(l);
            }
        }
        self.prompts.page_in(&classes)?;

        let pcfg = &self.cfg.proxy;
        let mut b = Binder::<f32>::new(true);
        let enc = self.model.encoder_prompts(&mut b)?;
        let mut rows = Vec::with_capacity(batch.images.len());
        for img in &batch.images {
            rows.push(self.model.embed(&mut b, img, &enc)?);
        }
        let x = b.graph.concat(&rows, 0)?;
        let o = b.param(&self.model.store, PROXY_BIAS)?;
        let mut accumulated = None;
        let loss = if pcfg.enabled {
            let gru = if pcfg.uses_gru() {
                Some(GruVars::bind(&mut b, &self.model.store)?)
            } else {
                None
            };
            let mut groups: Vec<(usize, Vec<Var>)> =
                classes.iter().map(|&c| (c, Vec::new())).collect();
            for (j, img) in batch.images.iter().enumerate() {
                let c = labels[j];
                let mut cls_vars = Vec::with_capacity(self.prompts.layers());
                if self.prompts.layers() > 0 {
                    let entry = self.prompts.get(c)?;
                    for (l, p) in entry.prompts.iter().enumerate() {
                        cls_vars.push(b.bind(&class_prompt_name(c, l), p, true));
                    }
                }
                let p = generate_proxy(&self.model, &mut b, pcfg, img, &enc, &cls_vars, rows[j])?;
                let slot = classes.iter().position(|&k| k == c).expect("class listed");
                groups[slot].1.push(p);
            }
            let mut rng = substream(self.cfg.run.seed, &[21, self.step]);
            let acc = accumulate_batch(
                &mut b.graph,
                pcfg,
                gru.as_ref(),
                &self.proxy.semantic,
                &groups,
                &mut rng,
            )?;
            let sem = assemble_semantic(&mut b.graph, &self.proxy.semantic, &acc.rows)?;
            let loss = training_loss(&mut b.graph, x, sem, o, labels, pcfg.alpha, &self.cfg.loss)?;
            accumulated = Some(acc);
            loss
        } else {
            let q = b.graph.l2_normalize(o, 1, L2_NORM_EPS)?;
            proxy_anchor_loss(&mut b.graph, x, q, labels, &self.cfg.loss)?
        };
        let loss_value = b.graph.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        let forward_done = Instant::now();
        b.graph.backward(loss)?;
        let backward_done = Instant::now();

        // gradients in a fixed order: registry order, then batch classes
        let mut store_grads: Vec<(String, Vec<f32>)> = Vec::new();
        for (name, p) in self.model.store.iter() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = b.grad(name) {
                store_grads.push((name.clone(), g.to_vec()));
            }
        }
        let mut prompt_grads: Vec<(usize, usize, Vec<f32>)> = Vec::new();
        for &c in &classes {
            for l in 0..self.prompts.layers() {
                if let Some(g) = b.grad(&class_prompt_name(c, l)) {
                    prompt_grads.push((c, l, g.to_vec()));
                }
            }
        }
        let mut grad_norms = IndexMap::new();
        let mut total_sq = 0.0f64;
        let named = store_grads.iter().map(|(n, g)| (n.clone(), g)).chain(
            prompt_grads
                .iter()
                .map(|(c, l, g)| (class_prompt_name(*c, *l), g)),
        );
        for (name, g) in named {
            let sq: f64 = g.iter().map(|v| (*v as f64) * (*v as f64)).sum();
            total_sq += sq;
            grad_norms.insert(name, sq.sqrt());
        }
        let grad_norm = total_sq.sqrt();
        let clip = match self.cfg.optim.max_grad_norm {
            Some(c) if grad_norm > c => Some((c / grad_norm) as f32),
            _ => None,
        };
        let ocfg = &self.cfg.optim;
        for (name, mut g) in store_grads {
            if let Some(s) = clip {
                g.iter_mut().for_each(|v| *v *= s);
            }
            let p = self
                .model
                .store
                .get_mut(&name)
                .expect("gradient of a registered parameter");
            let lr = match p.group {
                ParamGroup::Encoder => ocfg.lr,
                ParamGroup::Proxy => ocfg.lr_proxy,
            };
            let st = self.moments.entry(name).or_default();
            optim::update(p.value.data_mut(), &g, st, lr, ocfg);
        }
        for (c, l, mut g) in prompt_grads {
            if let Some(s) = clip {
                g.iter_mut().for_each(|v| *v *= s);
            }
            let entry = self.prompts.get_mut(c)?;
            optim::update(
                entry.prompts[l].data_mut(),
                &g,
                &mut entry.moments[l],
                ocfg.lr_proxy,
                ocfg,
            );
        }

        if let Some(acc) = accumulated {
            for (c, v) in &acc.rows {
                let row = b.graph.value(*v).data().to_vec();
                self.proxy.semantic.row_mut(*c).copy_from_slice(&row);
            }
            self.proxy.degenerate_updates += acc.degenerate;
        }
        let bias = self.model.store.value(PROXY_BIAS)?.clone();
        if pcfg.enabled {
            self.proxy.refresh_fused(&bias, pcfg.alpha)?;
        } else {
            self.proxy.fused = normalize_rows(&bias)?;
        }
        let end = Instant::now();
        self.step += 1;
        let ms = |a: Instant, z: Instant| (z - a).as_secs_f64() * 1e3;
        Ok(StepReport {
            step: self.step,
            loss: loss_value,
            grad_norm,
            page_ins: self.prompts.counters().page_ins,
            timings: StepTimings {
                forward_ms: ms(start, forward_done),
                backward_ms: ms(forward_done, backward_done),
                optimizer_ms: ms(backward_done, end),
                total_ms: ms(start, end),
            },
            grad_norms,
        })
    }

    pub fn evaluate(&self) -> Result<RetrievalMetrics> {
        evaluate_model(&self.model, &self.eval)
    }

    /// Runs the remaining steps up to `run.steps`. Batches are prepared one
    /// step ahead on a worker thread. Writes `metrics.csv`, `eval.csv` and
    /// the checkpoint files into `out_dir` when given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<RunSummary> {
        let total = self.cfg.run.steps;
        let every = self.cfg.run.eval_every;
        let wall = self.cfg.run.wall_clock;
        let mut metrics = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let mut m = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
                writeln!(m, "{METRICS_HEADER}")?;
                let mut e = BufWriter::new(File::create(dir.join(EVAL_FILE))?);
                writeln!(e, "{EVAL_HEADER}")?;
                Some((m, e))
            }
            None => None,
        };
        let mut reports = Vec::new();
        let mut evals = Vec::new();
        let record_eval = |step: u64,
                           trainer: &Trainer,
                           evals: &mut Vec<(u64, RetrievalMetrics)>,
                           out: &mut Option<(BufWriter<File>, BufWriter<File>)>|
         -> Result<()> {
            let r = trainer.evaluate()?;
            if let Some((_, e)) = out.as_mut() {
                writeln!(e, "{}", eval_row(step, &r))?;
            }
            evals.push((step, r));
            Ok(())
        };
        if self.step >= total {
            record_eval(self.step, self, &mut evals, &mut metrics)?;
        } else {
            let (train, sampler, cfg) =
                (self.train.clone(), self.sampler.clone(), self.cfg.clone());
            let first = self.step;
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = sync_channel::<Result<PreparedBatch>>(1);
                scope.spawn(move || {
                    for step in first..total {
                        if tx.send(prepare(&train, &sampler, &cfg, step)).is_err() {
                            break;
                        }
                    }
                });
                for batch in rx.iter() {
                    let report = self.train_step_prepared(batch?)?;
                    if let Some((m, _)) = metrics.as_mut() {
                        let ms = if wall { report.timings.total_ms } else { 0.0 };
                        writeln!(
                            m,
                            "{},{:.8},{:.8},{},{:.3}",
                            report.step, report.loss, report.grad_norm, report.page_ins, ms
                        )?;
                    }
                    let s = report.step;
                    reports.push(report);
                    if s == total || (every > 0 && s % every == 0) {
                        record_eval(s, self, &mut evals, &mut metrics)?;
                    }
                }
                Ok(())
            })?;
        }
        if let Some((mut m, mut e)) = metrics {
            m.flush()?;
            e.flush()?;
        }
        if let Some(dir) = out_dir {
            self.save(dir)?;
        }
        Ok(RunSummary {
            reports,
            evals,
            params: self.param_count(),
            peak_resident_bytes: self.peak_resident_bytes(),
        })
    }

    /// Every tensor of the model and proxy state, in a stable order.
    pub fn checkpoint_entries(&self) -> Result<Vec<(String, Tensor<f32>)>> {
        let mut out: Vec<(String, Tensor<f32>)> = self
            .model
            .store
            .iter()
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect();
        out.push((PROXY_SEMANTIC.into(), self.proxy.semantic.clone()));
        out.push((PROXY_FUSED.into(), self.proxy.fused.clone()));
        out.extend(self.prompts.export_prompts()?);
        Ok(out)
    }

    /// Moment buffers and counters as tensors: `<name>.m`, `<name>.v`,
    /// `<name>.t`, plus `trainer.step` and `proxy.degenerate_updates`.
    pub fn optimizer_entries(&self) -> Result<Vec<(String, Tensor<f32>)>> {
        let mut out = Vec::new();
        let mut push = |name: &str, m: &Moments| -> Result<()> {
            if !m.m.is_empty() {
                out.push((format!("{name}.m"), Tensor::new(&[m.m.len()], m.m.clone())?));
                out.push((format!("{name}.v"), Tensor::new(&[m.v.len()], m.v.clone())?));
            }
            out.push((format!("{name}.t"), Tensor::scalar(m.t as f32)));
            Ok(())
        };
        for (n, m) in &self.moments {
            push(n, m)?;
        }
        for (n, m) in self.prompts.export_moments()? {
            if m.t > 0 {
                push(&n, &m)?;
            }
        }
        out.push(("trainer.step".into(), Tensor::scalar(self.step as f32)));
        out.push((
            "proxy.degenerate_updates".into(),
            Tensor::scalar(self.proxy.degenerate_updates as f32),
        ));
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join(MODEL_FILE), &self.checkpoint_entries()?)?;
        checkpoint::save(&dir.join(OPTIMIZER_FILE), &self.optimizer_entries()?)
    }

    /// Restores tensors written by [`Trainer::checkpoint_entries`]. Every
    /// registry parameter must be present with its shape.
    pub fn load_model_entries(&mut self, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let mut by_name: IndexMap<String, Tensor<f32>> = entries.into_iter().collect();
        let names: Vec<String> = self.model.store.names().cloned().collect();
        for name in names {
            let t = by_name
                .shift_remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
            let p = self.model.store.get_mut(&name).expect("listed name");
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        let mut take_state = |name: &str, target: &mut Tensor<f32>| -> Result<()> {
            let t = by_name
                .shift_remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
            if t.shape() != target.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}",
                    t.shape()
                )));
            }
            *target = t;
            Ok(())
        };
        take_state(PROXY_SEMANTIC, &mut self.proxy.semantic)?;
        take_state(PROXY_FUSED, &mut self.proxy.fused)?;
        for c in 0..self.prompts.classes() {
            let mut entry = self.prompts.entry(c)?;
            for l in 0..self.prompts.layers() {
                let name = class_prompt_name(c, l);
                let t = by_name
                    .shift_remove(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
                if t.shape() != entry.prompts[l].shape() {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}",
                        t.shape()
                    )));
                }
                entry.prompts[l] = t;
            }
            self.prompts.replace(c, entry)?;
        }
        if let Some((name, _)) = by_name.first() {
            return Err(Error::Checkpoint(format!("unexpected entry `{name}`")));
        }
        Ok(())
    }

    pub fn load_optimizer_entries(&mut self, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let mut by_name: IndexMap<String, Tensor<f32>> = entries.into_iter().collect();
        let scalar = |t: Option<Tensor<f32>>, name: &str| -> Result<u64> {
            t.map(|t| t.data()[0] as u64)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
        };
        self.step = scalar(by_name.shift_remove("trainer.step"), "trainer.step")?;
        self.proxy.degenerate_updates = scalar(
            by_name.shift_remove("proxy.degenerate_updates"),
            "proxy.degenerate_updates",
        )?;
        let mut read = |name: &str| -> Option<Moments> {
            let t = by_name.shift_remove(&format!("{name}.t"))?;
            let m = by_name.shift_remove(&format!("{name}.m"));
            let v = by_name.shift_remove(&format!("{name}.v"));
            Some(Moments {
                m: m.map(|x| x.into_data()).unwrap_or_default(),
                v: v.map(|x| x.into_data()).unwrap_or_default(),
                t: t.data()[0] as u64,
            })
        };
        self.moments.clear();
        let names: Vec<String> = self.model.store.names().cloned().collect();
        for n in names {
            if let Some(m) = read(&n) {
                self.moments.insert(n, m);
            }
        }
        for c in 0..self.prompts.classes() {
            let mut entry: ClassEntry = self.prompts.entry(c)?;
            for l in 0..self.prompts.layers() {
                entry.moments[l] = read(&class_prompt_name(c, l)).unwrap_or_default();
            }
            self.prompts.replace(c, entry)?;
        }
        if let Some((name, _)) = by_name.first() {
            return Err(Error::Checkpoint(format!(
                "unexpected optimizer entry `{name}`"
            )));
        }
        Ok(())
    }

    /// Loads `model.vpck` and, when present, `optimizer.vpck` from `dir`.
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        self.load_model_entries(checkpoint::load(&dir.join(MODEL_FILE))?)?;
        let opt = dir.join(OPTIMIZER_FILE);
        if opt.exists() {
            self.load_optimizer_entries(checkpoint::load(&opt)?)?;
        }
        Ok(())
    }
}

fn prepare(
    train: &Dataset,
    sampler: &BalancedSampler,
    cfg: &ExperimentConfig,
    step: u64,
) -> Result<PreparedBatch> {
    let indices = sampler.batch_at(step);
    let size = cfg.model.image_size;
    let mut labels = Vec::with_capacity(indices.len());
    let mut images = Vec::with_capacity(indices.len());
    for (j, &i) in indices.iter().enumerate() {
        let item = &train.items[i];
        let mut rng = substream(cfg.run.seed, &[20, step, j as u64]);
        images.push(augment(&item.image, size, &cfg.data.augment, &mut rng)?);
        labels.push(item.label);
    }
    Ok(PreparedBatch {
        step,
        indices,
        labels,
        images,
    })
}

fn normalize_rows(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = crate::autograd::Graph::new();
    let v = g.constant(t.clone());
    let n = g.l2_normalize(v, 1, L2_NORM_EPS)?;
    Ok(g.value(n).clone())
}

pub fn eval_row(step: u64, r: &RetrievalMetrics) -> String {
    format!(
        "{step},{:.6},{:.6},{:.6},{:.6}",
        r.recall_at_1, r.recall_at_2, r.recall_at_4, r.map_at_r
    )
}
