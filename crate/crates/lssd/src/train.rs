//! The training orchestrator: epoch loop with per-batch language sampling,
//! loss selection via distillation switches, the validation stage with
//! per-language best-checkpoint tracking and teacher replacement, the STSD
//! ablation, and run-directory output.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batch, sample_language, temperature_probs, Batch, Corpus, Split};
use crate::error::{Error, Result};
use crate::loss::{
    combined_loss, distill_loss, nmt_loss, sample_weight, sentence_probability, LossBreakdown,
    LossConfig, LossMode, SentenceProb, WeightRule,
};
use crate::model::{init_model, restore, snapshot, ModelConfig, Seq2SeqModel};
use crate::optim::{adam_step, lr_at, OptimizerState};
use crate::snapshot::Snapshot;
use crate::tensor::{Tape, Tensor};

/// Per-language distillation state (switch Omega_l, best dev loss, teacher).
#[derive(Debug, Clone, Default)]
pub struct LanguageState {
    pub switch: bool,
    pub best_dev_loss: f64,
    pub teacher: Option<Snapshot>,
}

impl LanguageState {
    pub fn new() -> Self {
        LanguageState { switch: false, best_dev_loss: f64::INFINITY, teacher: None }
    }

    fn check_invariants(&self) {
        debug_assert_eq!(self.teacher.is_none(), self.best_dev_loss.is_infinite());
        if self.teacher.is_none() {
            debug_assert!(!self.switch);
        }
    }
}

/// Validation-stage state machine for one language: strict improvement
/// turns the switch off and replaces the teacher; anything else turns the
/// switch on. Returns whether the teacher was replaced.
pub fn validate_update_language(
    state: &mut LanguageState,
    model: &Seq2SeqModel,
    epoch: u32,
    dev_loss: f64,
) -> Result<bool> {
    if !dev_loss.is_finite() {
        return Err(Error::NonFinite(format!("dev loss at epoch {epoch}")));
    }
    let replaced = if dev_loss < state.best_dev_loss {
        state.switch = false;
        state.teacher = Some(snapshot(model, epoch, dev_loss)?);
        state.best_dev_loss = dev_loss;
        true
    } else {
        state.switch = true;
        false
    };
    state.check_invariants();
    Ok(replaced)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: u32,
    pub steps_per_epoch: u32,
    pub batch_size: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub tau: f64,
    pub mode: LossMode,
    pub label_smoothing: f64,
    /// Whether dev losses for model selection use the training label
    /// smoothing or raw cross entropy.
    pub smoothed_dev_loss: bool,
    pub sentence_prob: SentenceProb,
    pub lr_scale: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            steps_per_epoch: 100,
            batch_size: 16,
            alpha: 2.0,
            sigma: 2.0,
            tau: 1.0,
            mode: LossMode::Baseline,
            label_smoothing: 0.1,
            smoothed_dev_loss: true,
            sentence_prob: SentenceProb::Arithmetic,
            lr_scale: 1.0,
            warmup_steps: 400,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs, steps and batch size must be >= 1".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::InvalidConfig("warmup_steps must be >= 1".into()));
        }
        if self.alpha < 0.0 || !(self.sigma > 0.0) || !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("alpha >= 0, sigma > 0, tau > 0 required".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig("label_smoothing must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            sigma: self.sigma,
            label_smoothing: self.label_smoothing,
            mode: self.mode,
            sentence_prob: self.sentence_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangEpochRecord {
    pub dev_loss: f64,
    pub switch_after: bool,
    pub teacher_replaced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub langs: Vec<LangEpochRecord>,
    pub avg_dev_loss: f64,
}

/// Per-epoch, per-language validation history of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub languages: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    /// First epoch whose validation turned this language's switch on
    /// (the end of its initial training stage). 1-based epoch, None if the
    /// switch never turned on.
    pub fn first_switch_on_epoch(&self, lang: usize) -> Option<u32> {
        self.epochs.iter().find(|e| e.langs[lang].switch_after).map(|e| e.epoch)
    }

    pub fn loss_curves_csv(&self) -> String {
        let mut out = String::from("epoch,language,dev_loss,switch_after,teacher_replaced\n");
        for e in &self.epochs {
            for (l, rec) in e.langs.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    e.epoch,
                    self.languages[l],
                    rec.dev_loss,
                    if rec.switch_after { "on" } else { "off" },
                    u8::from(rec.teacher_replaced)
                )
                .unwrap();
            }
        }
        out
    }

    pub fn avg_dev_loss_csv(&self) -> String {
        let mut out = String::from("epoch,avg_dev_loss\n");
        for e in &self.epochs {
            writeln!(out, "{},{}", e.epoch, e.avg_dev_loss).unwrap();
        }
        out
    }

    /// Reconstructs a run log from the two CSVs in a run directory.
    pub fn from_run_dir(dir: &Path) -> Result<Self> {
        let curves_path = dir.join("loss_curves.csv");
        let text = std::fs::read_to_string(&curves_path)?;
        let malformed = |reason: String| Error::Malformed {
            path: curves_path.display().to_string(),
            reason,
        };
        let mut languages: Vec<String> = Vec::new();
        let mut epochs: Vec<EpochRecord> = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(malformed(format!("line {}: expected 5 fields", ln + 1)));
            }
            let epoch: u32 =
                fields[0].parse().map_err(|_| malformed(format!("line {}: bad epoch", ln + 1)))?;
            let lang = fields[1].to_string();
            let dev_loss: f64 = fields[2]
                .parse()
                .map_err(|_| malformed(format!("line {}: bad dev_loss", ln + 1)))?;
            let switch_after = match fields[3] {
                "on" => true,
                "off" => false,
                other => return Err(malformed(format!("line {}: bad switch {other:?}", ln + 1))),
            };
            let teacher_replaced = match fields[4] {
                "1" => true,
                "0" => false,
                other => return Err(malformed(format!("line {}: bad flag {other:?}", ln + 1))),
            };
            if epochs.len() <= 1 && !languages.contains(&lang) {
                languages.push(lang.clone());
            }
            if epochs.last().map(|e| e.epoch) != Some(epoch) {
                epochs.push(EpochRecord { epoch, langs: Vec::new(), avg_dev_loss: 0.0 });
            }
            epochs
                .last_mut()
                .unwrap()
                .langs
                .push(LangEpochRecord { dev_loss, switch_after, teacher_replaced });
        }
        if epochs.is_empty() {
            return Err(malformed("no epoch records".into()));
        }
        for e in &mut epochs {
            if e.langs.len() != languages.len() {
                return Err(malformed(format!("epoch {}: incomplete language set", e.epoch)));
            }
            e.avg_dev_loss = e.langs.iter().map(|r| r.dev_loss).sum::<f64>() / languages.len() as f64;
        }
        Ok(RunLog { languages, epochs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TeacherKey {
    /// Language index, or usize::MAX for the STSD global teacher.
    source: usize,
    epoch: u32,
}

/// Driver for one training run.
pub struct Trainer {
    pub model: Seq2SeqModel,
    pub states: Vec<LanguageState>,
    /// Aggregate switch/teacher for the STSD ablation, keyed on the
    /// average dev loss.
    pub global_state: LanguageState,
    pub opt: OptimizerState,
    pub config: TrainConfig,
    /// Number of teacher forward passes executed.
    pub teacher_forward_count: u64,
    teacher_cache: Option<(TeacherKey, Seq2SeqModel)>,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Seq2SeqModel, num_languages: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = OptimizerState::new(config.adam_beta1, config.adam_beta2, config.adam_eps);
        let dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6472_6f70);
        Ok(Trainer {
            model,
            states: (0..num_languages).map(|_| LanguageState::new()).collect(),
            global_state: LanguageState::new(),
            opt,
            config,
            teacher_forward_count: 0,
            teacher_cache: None,
            dropout_rng,
        })
    }

    fn switch_on(&self, lang: usize) -> bool {
        match self.config.mode {
            LossMode::Stsd => self.global_state.switch,
            _ => self.states[lang].switch,
        }
    }

    /// Read-only teacher model for `lang`, refreshed from the snapshot when
    /// the teacher was replaced since the last use.
    fn teacher_model(&mut self, lang: usize) -> Result<&Seq2SeqModel> {
        let (source, snap) = match self.config.mode {
            LossMode::Stsd => (usize::MAX, self.global_state.teacher.as_ref()),
            _ => (lang, self.states[lang].teacher.as_ref()),
        };
        let snap = snap.ok_or_else(|| {
            Error::InvalidArgument("internal: distillation switch on with absent teacher".into())
        })?;
        let key = TeacherKey { source, epoch: snap.epoch };
        let refresh = !matches!(&self.teacher_cache, Some((k, _)) if *k == key);
        if refresh {
            let mut copy = self.model.clone();
            restore(&mut copy, snap)?;
            for t in copy.params.values_mut() {
                t.requires_grad = false;
                t.grad = None;
            }
            self.teacher_cache = Some((key, copy));
        }
        Ok(&self.teacher_cache.as_ref().unwrap().1)
    }

    /// One optimizer step on one batch (Algorithm lines 5-10).
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.train_step_for(batch, 0)
    }

    pub fn train_step_for(&mut self, batch: &Batch, lang: usize) -> Result<LossBreakdown> {
        let cfg = self.config.loss_config();
        let switch_on = self.switch_on(lang) && cfg.mode.distills();

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let dists = self.model.forward_on_tape(
            &mut tape,
            &bound,
            &batch.src,
            &batch.tgt,
            true,
            Some(&mut self.dropout_rng),
        )?;
        let nmt = nmt_loss(&mut tape, dists, &batch.tgt, &batch.tgt_mask, cfg.label_smoothing)?;

        let b = batch.tgt.rows;
        let t = batch.tgt.cols;
        let mut g_values: Vec<f64> = Vec::new();
        let mut distill_node = None;
        let mut distill_value = 0.0;
        if switch_on {
            let teacher_dists = {
                let teacher = self.teacher_model(lang)?;
                let out = teacher.forward(&batch.src, &batch.tgt, false)?;
                self.teacher_forward_count += 1;
                out
            };
            let rule = cfg.mode.weight_rule();
            g_values = match rule {
                WeightRule::Whole => vec![1.0; b],
                _ => {
                    let student_vals = tape.to_tensor(dists);
                    let v = student_vals.shape[2];
                    let mut g = Vec::with_capacity(b);
                    for s in 0..b {
                        let slice = |src: &Tensor| {
                            Tensor::new(
                                vec![t, v],
                                src.values[s * t * v..(s + 1) * t * v].to_vec(),
                            )
                            .unwrap()
                        };
                        let targets = batch.tgt.row(s);
                        let mask = &batch.tgt_mask[s * t..(s + 1) * t];
                        let p_t = sentence_probability(
                            &slice(&teacher_dists),
                            targets,
                            mask,
                            cfg.sentence_prob,
                        )?;
                        let p_s = sentence_probability(
                            &slice(&student_vals),
                            targets,
                            mask,
                            cfg.sentence_prob,
                        )?;
                        g.push(sample_weight(rule, p_t.min(1.0), p_s.min(1.0), cfg.sigma)?);
                    }
                    g
                }
            };
            let d = distill_loss(&mut tape, &teacher_dists, dists, &batch.tgt_mask, &g_values)?;
            distill_value = tape.value(d)[0];
            distill_node = Some(d);
        }

        let combined = combined_loss(&mut tape, nmt, distill_node, cfg.alpha, switch_on)?;
        let breakdown = LossBreakdown {
            nmt_loss: tape.value(nmt)[0],
            distill_loss: distill_value,
            g_values,
            combined: tape.value(combined)[0],
        };

        tape.backward(combined)?;
        self.model.accumulate_grads(&tape, &bound);
        let lr = lr_at(
            self.opt.step + 1,
            self.config.lr_scale,
            self.config.warmup_steps,
            self.model.config.embed_dim,
        )?;
        adam_step(&mut self.model, &mut self.opt, lr)?;
        Ok(breakdown)
    }

    /// Token-mean dev loss for one language, in eval mode.
    pub fn dev_loss(&self, corpus: &Corpus, lang: usize) -> Result<f64> {
        let eps = if self.config.smoothed_dev_loss { self.config.label_smoothing } else { 0.0 };
        dataset_loss(&self.model, corpus, lang, Split::Dev, self.config.batch_size, eps)
    }

    /// Validation stage (Algorithm lines 12-18): per-language dev losses,
    /// switch updates and teacher replacement. Returns the dev losses.
    pub fn validate_and_update(&mut self, corpus: &Corpus, epoch: u32) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.states.len());
        for lang in 0..self.states.len() {
            losses.push(self.dev_loss(corpus, lang)?);
        }
        for (lang, &loss) in losses.iter().enumerate() {
            validate_update_language(&mut self.states[lang], &self.model, epoch, loss)?;
        }
        Ok(losses)
    }
}

/// Token-mean loss of `model` over a whole split.
pub fn dataset_loss(
    model: &Seq2SeqModel,
    corpus: &Corpus,
    lang: usize,
    split: Split,
    batch_size: usize,
    label_smoothing: f64,
) -> Result<f64> {
    let n = corpus.data[lang].split(split).len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "empty {} split for language {}",
            split.name(),
            corpus.languages[lang]
        )));
    }
    let mut weighted = 0.0;
    let mut tokens = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let batch = make_batch(corpus, lang, split, &indices)?;
        let mut tape = Tape::new();
        let mut frozen = model.clone();
        for t in frozen.params.values_mut() {
            t.requires_grad = false;
        }
        let bound = frozen.bind(&mut tape)?;
        let dists =
            frozen.forward_on_tape(&mut tape, &bound, &batch.src, &batch.tgt, false, None)?;
        let loss = nmt_loss(&mut tape, dists, &batch.tgt, &batch.tgt_mask, label_smoothing)?;
        let count: f64 = batch.tgt_mask.iter().map(|&m| m as f64).sum();
        weighted += tape.value(loss)[0] * count;
        tokens += count;
        start = end;
    }
    let loss = weighted / tokens;
    if !loss.is_finite() {
        return Err(Error::NonFinite("dataset loss".into()));
    }
    Ok(loss)
}

/// Everything a completed run produces.
pub struct TrainOutcome {
    pub log: RunLog,
    pub model: Seq2SeqModel,
    /// Per-language best checkpoints (the final teachers).
    pub lang_best: Vec<Snapshot>,
    /// Checkpoint with minimal average dev loss (ties to the earliest epoch).
    pub overall_best: Snapshot,
}

/// Runs the full K-epoch training (Algorithm 1), deterministic given seeds.
pub fn run_training(
    corpus: &Corpus,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    model_config.validate()?;
    if model_config.vocab_size != corpus.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "model vocab_size {} != corpus vocabulary {}",
            model_config.vocab_size,
            corpus.vocab_size()
        )));
    }
    let needed = corpus.max_emitted_len();
    if needed > model_config.max_seq_len {
        return Err(Error::InvalidConfig(format!(
            "max_seq_len {} too small for corpus sequences of length {}",
            model_config.max_seq_len, needed
        )));
    }

    let model = init_model(model_config, train_config.seed)?;
    let num_langs = corpus.num_languages();
    let mut trainer = Trainer::new(model, num_langs, train_config.clone())?;
    let probs = temperature_probs(&corpus.train_sizes(), train_config.tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0x5a6d_91e4_33c7_08bf);

    let mut log = RunLog { languages: corpus.languages.clone(), epochs: Vec::new() };
    let mut overall_best: Option<Snapshot> = None;

    for epoch in 1..=train_config.epochs {
        for _ in 0..train_config.steps_per_epoch {
            let lang = sample_language(&probs, &mut rng);
            let train_n = corpus.data[lang].train.len();
            let indices: Vec<usize> = (0..train_config.batch_size)
                .map(|_| rng.gen_range(0..train_n))
                .collect();
            let batch = make_batch(corpus, lang, Split::Train, &indices)?;
            trainer.train_step_for(&batch, lang)?;
        }

        let losses = trainer.validate_and_update(corpus, epoch)?;
        let avg = losses.iter().sum::<f64>() / num_langs as f64;

        // STSD: one aggregate switch/teacher keyed on the average dev loss.
        let mut global_replaced = false;
        if train_config.mode == LossMode::Stsd {
            global_replaced =
                validate_update_language(&mut trainer.global_state, &trainer.model, epoch, avg)?;
        }

        let langs: Vec<LangEpochRecord> = losses
            .iter()
            .enumerate()
            .map(|(l, &dev_loss)| {
                let st = &trainer.states[l];
                LangEpochRecord {
                    dev_loss,
                    switch_after: st.switch,
                    teacher_replaced: st
                        .teacher
                        .as_ref()
                        .map(|t| t.epoch == epoch)
                        .unwrap_or(false),
                }
            })
            .collect();
        let _ = global_replaced;
        log.epochs.push(EpochRecord { epoch, langs, avg_dev_loss: avg });

        let improved = overall_best.as_ref().map(|b| avg < b.dev_loss).unwrap_or(true);
        if improved {
            overall_best = Some(snapshot(&trainer.model, epoch, avg)?);
        }
    }

    let lang_best: Vec<Snapshot> = trainer
        .states
        .iter()
        .map(|s| s.teacher.clone().expect("teacher set at first validation"))
        .collect();
    Ok(TrainOutcome {
        log,
        model: trainer.model,
        lang_best,
        overall_best: overall_best.expect("at least one epoch"),
    })
}

/// Writes the run directory: config echo, loss curves, average dev loss,
/// and checkpoints.
pub fn write_run_dir(dir: &Path, config_echo: &str, corpus: &Corpus, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::write(dir.join("config.txt"), config_echo)?;
    std::fs::write(dir.join("loss_curves.csv"), outcome.log.loss_curves_csv())?;
    std::fs::write(dir.join("avg_dev_loss.csv"), outcome.log.avg_dev_loss_csv())?;
    outcome.overall_best.save(&dir.join("checkpoints").join("overall_best.lssd"))?;
    for (l, snap) in outcome.lang_best.iter().enumerate() {
        snap.save(&dir.join("checkpoints").join(format!("best_{}.lssd", corpus.languages[l])))?;
    }
    snapshot(&outcome.model, outcome.log.epochs.last().map(|e| e.epoch).unwrap_or(0), f64::NAN)
        .ok()
        .map(|s| s.save(&dir.join("final.lssd")))
        .transpose()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, LanguageSpec, Transform};

    pub fn tiny_corpus() -> Corpus {
        let specs = vec![
            LanguageSpec {
                name: "aa".into(),
                train_size: 12,
                dev_size: 4,
                test_size: 4,
                transform: Transform::Permutation { param: 1 },
                payload_len_range: (2, 4),
            },
            LanguageSpec {
                name: "bb".into(),
                train_size: 24,
                dev_size: 4,
                test_size: 4,
                transform: Transform::Shift { k: 3 },
                payload_len_range: (2, 4),
            },
        ];
        generate_corpus(&specs, 12, 7).unwrap()
    }

    pub fn tiny_model_config(corpus: &Corpus) -> ModelConfig {
        ModelConfig {
            vocab_size: corpus.vocab_size(),
            embed_dim: 16,
            hidden_dim: 32,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 8,
            dropout: 0.0,
        }
    }

    fn quick_train_config(mode: LossMode) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            steps_per_epoch: 4,
            batch_size: 4,
            mode,
            warmup_steps: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn scripted_state_machine_matches_figure_narrative() {
        // Losses decrease for k'=3 epochs, then rise twice, then improve:
        // switches off,off,off,on,on,off with replacements at 1,2,3,6.
        let corpus = tiny_corpus();
        let model = init_model(&tiny_model_config(&corpus), 0).unwrap();
        let mut state = LanguageState::new();
        let script = [3.0, 2.5, 2.0, 2.2, 2.1, 1.8];
        let mut switches = Vec::new();
        let mut replacements = 0;
        for (i, &loss) in script.iter().enumerate() {
            let replaced =
                validate_update_language(&mut state, &model, (i + 1) as u32, loss).unwrap();
            switches.push(state.switch);
            replacements += u32::from(replaced);
        }
        assert_eq!(switches, vec![false, false, false, true, true, false]);
        assert_eq!(replacements, 4); // k' + 1
        assert_eq!(state.teacher.as_ref().unwrap().epoch, 6);
        assert_eq!(state.best_dev_loss, 1.8);
    }

    #[test]
    fn tie_is_a_non_improvement() {
        let corpus = tiny_corpus();
        let model = init_model(&tiny_model_config(&corpus), 0).unwrap();
        let mut state = LanguageState::new();
        validate_update_language(&mut state, &model, 1, 1.2).unwrap();
        assert!(!state.switch);
        let replaced = validate_update_language(&mut state, &model, 2, 1.2).unwrap();
        assert!(!replaced);
        assert!(state.switch);
        assert_eq!(state.teacher.as_ref().unwrap().epoch, 1);
    }

    #[test]
    fn first_epoch_always_improves_from_infinity() {
        let corpus = tiny_corpus();
        let model = init_model(&tiny_model_config(&corpus), 0).unwrap();
        let mut state = LanguageState::new();
        let replaced = validate_update_language(&mut state, &model, 1, 100.0).unwrap();
        assert!(replaced);
        assert!(!state.switch);
        assert!(state.teacher.is_some());
    }

    #[test]
    fn non_finite_dev_loss_rejected() {
        let corpus = tiny_corpus();
        let model = init_model(&tiny_model_config(&corpus), 0).unwrap();
        let mut state = LanguageState::new();
        assert!(validate_update_language(&mut state, &model, 1, f64::NAN).is_err());
    }

    #[test]
    fn baseline_never_runs_teacher() {
        let corpus = tiny_corpus();
        let outcome_model = init_model(&tiny_model_config(&corpus), 1).unwrap();
        let mut trainer =
            Trainer::new(outcome_model, 2, quick_train_config(LossMode::Baseline)).unwrap();
        for epoch in 1..=2 {
            let batch = make_batch(&corpus, 0, Split::Train, &[0, 1]).unwrap();
            let bd = trainer.train_step_for(&batch, 0).unwrap();
            assert_eq!(bd.combined, bd.nmt_loss);
            assert!(bd.g_values.is_empty());
            trainer.validate_and_update(&corpus, epoch).unwrap();
        }
        assert_eq!(trainer.teacher_forward_count, 0);
    }

    #[test]
    fn switch_off_skips_teacher_in_lssd_mode() {
        let corpus = tiny_corpus();
        let model = init_model(&tiny_model_config(&corpus), 1).unwrap();
        let mut trainer =
            Trainer::new(model, 2, quick_train_config(LossMode::LssdWhole)).unwrap();
        // Epoch 1: no teacher exists, switches are off.
        let batch = make_batch(&corpus, 0, Split::Train, &[0, 1]).unwrap();
        let bd = trainer.train_step_for(&batch, 0).unwrap();
        assert_eq!(trainer.teacher_forward_count, 0);
        assert_eq!(bd.combined, bd.nmt_loss);
    }

    #[test]
    fn whole_mode_weights_are_one_when_switch_on() {
        let corpus = tiny_corpus();
        let model = init_model(&tiny_model_config(&corpus), 1).unwrap();
        let mut trainer =
            Trainer::new(model, 2, quick_train_config(LossMode::LssdWhole)).unwrap();
        trainer.validate_and_update(&corpus, 1).unwrap();
        // Force the switch on (as after a non-improvement).
        trainer.states[0].switch = true;
        let batch = make_batch(&corpus, 0, Split::Train, &[0, 1, 2]).unwrap();
        let bd = trainer.train_step_for(&batch, 0).unwrap();
        assert_eq!(bd.g_values, vec![1.0; 3]);
        assert_eq!(trainer.teacher_forward_count, 1);
        assert!((bd.combined - (bd.nmt_loss + trainer.config.alpha * bd.distill_loss)).abs() < 1e-12);
    }

    #[test]
    fn selective_and_adaptive_weights_in_range() {
        let corpus = tiny_corpus();
        for mode in [LossMode::LssdSelective, LossMode::LssdAdaptive] {
            let model = init_model(&tiny_model_config(&corpus), 1).unwrap();
            let mut trainer = Trainer::new(model, 2, quick_train_config(mode)).unwrap();
            trainer.validate_and_update(&corpus, 1).unwrap();
            trainer.states[0].switch = true;
            let batch = make_batch(&corpus, 0, Split::Train, &[0, 1, 2, 3]).unwrap();
            let bd = trainer.train_step_for(&batch, 0).unwrap();
            assert_eq!(bd.g_values.len(), 4);
            for &g in &bd.g_values {
                match mode {
                    LossMode::LssdSelective => assert!(g == 0.0 || g == 1.0),
                    LossMode::LssdAdaptive => assert!(g > 0.0 && g <= trainer.config.sigma),
                    _ => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn switch_on_without_teacher_is_internal_error() {
        let corpus = tiny_corpus();
        let model = init_model(&tiny_model_config(&corpus), 1).unwrap();
        let mut trainer =
            Trainer::new(model, 2, quick_train_config(LossMode::LssdWhole)).unwrap();
        trainer.states[0].switch = true; // violates the invariant
        let batch = make_batch(&corpus, 0, Split::Train, &[0]).unwrap();
        assert!(trainer.train_step_for(&batch, 0).is_err());
    }

    #[test]
    fn run_training_single_epoch_shape() {
        let corpus = tiny_corpus();
        let mc = tiny_model_config(&corpus);
        let tc = TrainConfig {
            epochs: 1,
            steps_per_epoch: 1,
            batch_size: 2,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let out = run_training(&corpus, &mc, &tc).unwrap();
        assert_eq!(out.log.epochs.len(), 1);
        assert_eq!(out.log.epochs[0].langs.len(), 2);
        assert_eq!(out.overall_best.epoch, 1);
        assert_eq!(out.lang_best.len(), 2);
    }

    #[test]
    fn run_training_is_deterministic() {
        let corpus = tiny_corpus();
        let mc = tiny_model_config(&corpus);
        let tc = quick_train_config(LossMode::LssdWhole);
        let a = run_training(&corpus, &mc, &tc).unwrap();
        let b = run_training(&corpus, &mc, &tc).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.loss_curves_csv(), b.log.loss_curves_csv());
        for (x, y) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(x.1.values, y.1.values, "{}", x.0);
        }
    }

    #[test]
    fn epoch_one_identical_across_modes() {
        // No teacher exists during epoch 1, so distillation cannot occur.
        let corpus = tiny_corpus();
        let mc = tiny_model_config(&corpus);
        let base = TrainConfig {
            epochs: 1,
            steps_per_epoch: 4,
            batch_size: 4,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let a = run_training(&corpus, &mc, &TrainConfig { mode: LossMode::Baseline, ..base.clone() })
            .unwrap();
        let b =
            run_training(&corpus, &mc, &TrainConfig { mode: LossMode::LssdWhole, ..base.clone() })
                .unwrap();
        assert_eq!(a.log.epochs[0], b.log.epochs[0]);
    }

    #[test]
    fn run_log_invariants_hold() {
        let corpus = tiny_corpus();
        let mc = tiny_model_config(&corpus);
        let tc = quick_train_config(LossMode::LssdWhole);
        let out = run_training(&corpus, &mc, &tc).unwrap();
        // Eq.-2 average
        for e in &out.log.epochs {
            let avg = e.langs.iter().map(|r| r.dev_loss).sum::<f64>() / e.langs.len() as f64;
            assert!((avg - e.avg_dev_loss).abs() < 1e-9);
        }
        // Overall best <= every epoch average.
        for e in &out.log.epochs {
            assert!(out.overall_best.dev_loss <= e.avg_dev_loss + 1e-12);
        }
        // Per-language best equals running min of dev losses.
        for l in 0..2 {
            let min = out
                .log
                .epochs
                .iter()
                .map(|e| e.langs[l].dev_loss)
                .fold(f64::INFINITY, f64::min);
            assert!((out.lang_best[l].dev_loss - min).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_snapshot_isolated_from_model_updates() {
        let corpus = tiny_corpus();
        let model = init_model(&tiny_model_config(&corpus), 1).unwrap();
        let mut trainer =
            Trainer::new(model, 2, quick_train_config(LossMode::LssdWhole)).unwrap();
        trainer.validate_and_update(&corpus, 1).unwrap();
        let teacher_vals = trainer.states[0].teacher.as_ref().unwrap().params["embed.weight"]
            .values
            .clone();
        let batch = make_batch(&corpus, 0, Split::Train, &[0, 1]).unwrap();
        trainer.train_step_for(&batch, 0).unwrap();
        assert_eq!(
            trainer.states[0].teacher.as_ref().unwrap().params["embed.weight"].values,
            teacher_vals
        );
    }

    #[test]
    fn run_log_csv_roundtrip() {
        let corpus = tiny_corpus();
        let mc = tiny_model_config(&corpus);
        let tc = quick_train_config(LossMode::Baseline);
        let out = run_training(&corpus, &mc, &tc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), "# echo\n", &corpus, &out).unwrap();
        let back = RunLog::from_run_dir(dir.path()).unwrap();
        assert_eq!(back.languages, out.log.languages);
        assert_eq!(back.epochs.len(), out.log.epochs.len());
        for (a, b) in back.epochs.iter().zip(&out.log.epochs) {
            assert_eq!(a.epoch, b.epoch);
            for (x, y) in a.langs.iter().zip(&b.langs) {
                assert_eq!(x.switch_after, y.switch_after);
                assert_eq!(x.teacher_replaced, y.teacher_replaced);
                assert!((x.dev_loss - y.dev_loss).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn stsd_uses_global_switch() {
        let corpus = tiny_corpus();
        let model = init_model(&tiny_model_config(&corpus), 1).unwrap();
        let mut trainer = Trainer::new(model, 2, quick_train_config(LossMode::Stsd)).unwrap();
        // Per-language switches on but global off: no distillation.
        trainer.validate_and_update(&corpus, 1).unwrap();
        let m = trainer.model.clone();
        validate_update_language(&mut trainer.global_state, &m, 1, 1.0).unwrap();
        trainer.states[0].switch = true;
        let batch = make_batch(&corpus, 0, Split::Train, &[0]).unwrap();
        trainer.train_step_for(&batch, 0).unwrap();
        assert_eq!(trainer.teacher_forward_count, 0);
        // Global on: teacher runs even though it is the overall checkpoint.
        trainer.global_state.switch = true;
        trainer.train_step_for(&batch, 0).unwrap();
        assert_eq!(trainer.teacher_forward_count, 1);
    }
}
