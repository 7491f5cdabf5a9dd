//! Retrieval and activity-recognition evaluation.
//!
//! Retrieval ranks keys by inner product for each query row, with ties
//! broken toward the lower key index so results never depend on sort
//! internals. Classification covers three regimes: nearest-label zero-shot,
//! a linear probe on frozen embeddings, and end-to-end fine-tuning. All
//! reports render as sorted key=value text so identical runs produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::contrastive;
use crate::encoders::EncoderParams;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::training::{self, OptState, TrainConfig};
use crate::{Error, Result, Scalar};

pub const DEFAULT_KS: &[usize] = &[1, 10, 50];

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: String,
    /// Keyed by the requested k; a k larger than the key count is evaluated
    /// at the clamped value recorded in `clamped`.
    pub r_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub n_queries: usize,
    pub clamped: Vec<(usize, usize)>,
}

impl RetrievalReport {
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "direction={}", self.direction);
        let _ = writeln!(out, "n_queries={}", self.n_queries);
        for (k, v) in &self.r_at {
            let _ = writeln!(out, "r_at_{k}={v}");
        }
        let _ = writeln!(out, "mrr={}", self.mrr);
        for (requested, used) in &self.clamped {
            let _ = writeln!(out, "warning=k {requested} clamped to {used}");
        }
        out
    }
}

/// 1-based rank of the true key for each query: the count of keys that beat
/// it, where a key beats the true one by strictly higher similarity or by
/// equal similarity and lower index.
fn true_key_ranks<S: Scalar>(queries: &Tensor<S>, keys: &Tensor<S>) -> Result<Vec<usize>> {
    let (nq, d) = contrastive::validate_rows(queries)?;
    let (nk, dk) = contrastive::validate_rows(keys)?;
    if nq != nk || d != dk {
        return Err(Error::ShapeMismatch {
            op: "retrieve",
            left: queries.shape().to_vec(),
            right: keys.shape().to_vec(),
        });
    }
    let sims = queries.matmul(&keys.transpose()?)?;
    let mut ranks = Vec::with_capacity(nq);
    for q in 0..nq {
        let true_sim = sims.at2(q, q);
        let mut beaten_by = 0usize;
        for j in 0..nk {
            if j == q {
                continue;
            }
            let s = sims.at2(q, j);
            if s > true_sim || (s == true_sim && j < q) {
                beaten_by += 1;
            }
        }
        ranks.push(beaten_by + 1);
    }
    Ok(ranks)
}

/// Recall@k and mean reciprocal rank for row-paired queries and keys.
pub fn retrieve<S: Scalar>(
    queries: &Tensor<S>,
    keys: &Tensor<S>,
    ks: &[usize],
    direction: &str,
) -> Result<RetrievalReport> {
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(Error::Argument("ks must be nonempty and positive".into()));
    }
    let ranks = true_key_ranks(queries, keys)?;
    let n = ranks.len();
    let mut r_at = BTreeMap::new();
    let mut clamped = Vec::new();
    for &k in ks {
        let used = k.min(n);
        if used != k {
            clamped.push((k, used));
        }
        let hits = ranks.iter().filter(|&&r| r <= used).count();
        r_at.insert(k, hits as f64 / n as f64);
    }
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64;
    Ok(RetrievalReport {
        direction: direction.to_string(),
        r_at,
        mrr,
        n_queries: n,
        clamped,
    })
}

/// Top `k` key indices with similarities for each query, for qualitative
/// listings. Same tie rule as `retrieve`.
pub fn top_items<S: Scalar>(
    queries: &Tensor<S>,
    keys: &Tensor<S>,
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let (nq, _) = contrastive::validate_rows(queries)?;
    let (nk, _) = contrastive::validate_rows(keys)?;
    let sims = queries.matmul(&keys.transpose()?)?;
    let k = k.min(nk);
    let mut out = Vec::with_capacity(nq);
    for q in 0..nq {
        let mut order: Vec<usize> = (0..nk).collect();
        order.sort_by(|&a, &b| {
            sims.at2(q, b)
                .partial_cmp(&sims.at2(q, a))
                .unwrap()
                .then(a.cmp(&b))
        });
        out.push(
            order[..k]
                .iter()
                .map(|&j| (j, sims.at2(q, j).to_f64()))
                .collect(),
        );
    }
    Ok(out)
}

/// Nearest-label classification; ties go to the lexicographically smaller
/// label.
pub fn zero_shot_classify<S: Scalar>(
    window_emb: &Tensor<S>,
    label_embs: &BTreeMap<String, Tensor<S>>,
) -> Result<String> {
    if label_embs.is_empty() {
        return Err(Error::Empty("label embeddings"));
    }
    contrastive::validate_rows(window_emb)?;
    let mut best: Option<(S, &String)> = None;
    for (label, emb) in label_embs {
        contrastive::validate_rows(emb)?;
        let sim = window_emb.dot(emb)?;
        if best.as_ref().is_none_or(|(s, _)| sim > *s) {
            best = Some((sim, label));
        }
    }
    Ok(best.unwrap().1.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Zeroshot,
    Transfer,
    Finetune,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Zeroshot => "zeroshot",
            Regime::Transfer => "transfer",
            Regime::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarReport {
    pub regime: Regime,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: BTreeMap<String, f64>,
    pub n_eval: usize,
    pub warnings: Vec<String>,
}

impl HarReport {
    pub fn from_predictions(
        regime: Regime,
        preds: &[usize],
        truths: &[usize],
        classes: &[String],
        warnings: Vec<String>,
    ) -> Result<Self> {
        let (macro_f1, per_class) = macro_f1(preds, truths, classes.len())?;
        let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
        let per_class_f1 = classes
            .iter()
            .cloned()
            .zip(per_class.iter().copied())
            .collect();
        Ok(Self {
            regime,
            accuracy: correct as f64 / preds.len() as f64,
            macro_f1,
            per_class_f1,
            n_eval: preds.len(),
            warnings,
        })
    }

    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "regime={}", self.regime.as_str());
        let _ = writeln!(out, "n_eval={}", self.n_eval);
        let _ = writeln!(out, "accuracy={}", self.accuracy);
        let _ = writeln!(out, "macro_f1={}", self.macro_f1);
        for (label, f1) in &self.per_class_f1 {
            let _ = writeln!(out, "f1[{label}]={f1}");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning={w}");
        }
        out
    }
}

/// Unweighted mean of per-class F1. A class with no true and no predicted
/// instances contributes zero and still counts toward the mean.
pub fn macro_f1(preds: &[usize], truths: &[usize], n_classes: usize) -> Result<(f64, Vec<f64>)> {
    if preds.len() != truths.len() {
        return Err(Error::Mismatch(format!(
            "{} predictions but {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if let Some(&bad) = preds.iter().chain(truths).find(|&&c| c >= n_classes) {
        return Err(Error::Argument(format!(
            "class index {bad} out of range for {n_classes} classes"
        )));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &t) in preds.iter().zip(truths) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let macro_avg = per_class.iter().sum::<f64>() / n_classes as f64;
    Ok((macro_avg, per_class))
}

/// Zero-shot evaluation over a labeled embedding set.
pub fn zero_shot_har<S: Scalar>(
    embs: &Tensor<S>,
    truths: &[usize],
    classes: &[String],
    label_embs: &BTreeMap<String, Tensor<S>>,
) -> Result<HarReport> {
    let (n, _) = contrastive::validate_rows(embs)?;
    if truths.len() != n {
        return Err(Error::Mismatch(format!(
            "{n} embeddings but {} labels",
            truths.len()
        )));
    }
    for label in classes {
        if !label_embs.contains_key(label) {
            return Err(Error::Lookup(format!("no embedding for label {label:?}")));
        }
    }
    let mut preds = Vec::with_capacity(n);
    for i in 0..n {
        let row = embs.slice_rows(i, i + 1)?;
        let label = zero_shot_classify(&row, label_embs)?;
        let idx = classes
            .iter()
            .position(|c| *c == label)
            .ok_or_else(|| Error::Lookup(format!("predicted label {label:?} not in class list")))?;
        preds.push(idx);
    }
    HarReport::from_predictions(Regime::Zeroshot, &preds, truths, classes, Vec::new())
}

/// A trained linear classification head.
#[derive(Clone, Debug)]
pub struct ProbeModel<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> ProbeModel<S> {
    pub fn zeros(dim: usize, n_classes: usize) -> Self {
        Self {
            w: Tensor::zeros(vec![dim, n_classes]),
            b: Tensor::zeros(vec![1, n_classes]),
        }
    }

    pub fn logits(&self, embs: &Tensor<S>) -> Result<Tensor<S>> {
        embs.matmul(&self.w)?.add_row(&self.b)
    }
}

/// Deterministic full-batch head training: zero init, adaptive updates, no
/// randomness anywhere.
#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
        }
    }
}

fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<usize>> {
    let (n, k) = logits.dims2("argmax_rows")?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0usize;
        for j in 1..k {
            if logits.at2(i, j) > logits.at2(i, best) {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

fn check_labels(n: usize, labels: &[usize], n_classes: usize, what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Mismatch(format!(
            "{n} {what} embeddings but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Argument(format!(
            "label index {bad} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

fn head_step<S: Scalar>(
    head: &mut ProbeModel<S>,
    embs: &Tensor<S>,
    labels: &[usize],
    opt: &mut OptState<S>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let w = tape.param(head.w.clone());
    let b = tape.param(head.b.clone());
    let x = tape.constant(embs.clone());
    let z = tape.matmul(x, w)?;
    let z = tape.add_row(z, b)?;
    let loss_var = tape.cross_entropy(z, labels.to_vec())?;
    let loss = tape.value(loss_var).item()?.to_f64();
    let mut grads = tape.backward(loss_var)?;
    let mut params = BTreeMap::new();
    params.insert("w".to_string(), head.w.clone());
    params.insert("b".to_string(), head.b.clone());
    let mut gmap = BTreeMap::new();
    if let Some(g) = grads.take(w) {
        gmap.insert("w".to_string(), g);
    }
    if let Some(g) = grads.take(b) {
        gmap.insert("b".to_string(), g);
    }
    training::update_step(&mut params, &gmap, opt, cfg)?;
    head.w = params.remove("w").unwrap();
    head.b = params.remove("b").unwrap();
    Ok(loss)
}

/// Trains a linear head on frozen embeddings and evaluates it on the test
/// embeddings. Returns the report and the trained head.
pub fn linear_probe<S: Scalar>(
    train_embs: &Tensor<S>,
    train_labels: &[usize],
    test_embs: &Tensor<S>,
    test_labels: &[usize],
    classes: &[String],
    cfg: &ProbeConfig,
) -> Result<(HarReport, ProbeModel<S>)> {
    let (n_train, d) = contrastive::validate_rows(train_embs)?;
    let (n_test, d_test) = contrastive::validate_rows(test_embs)?;
    if d != d_test {
        return Err(Error::Mismatch(format!(
            "train embeddings are {d}-dimensional, test {d_test}"
        )));
    }
    if classes.is_empty() {
        return Err(Error::Empty("class list"));
    }
    check_labels(n_train, train_labels, classes.len(), "train")?;
    check_labels(n_test, test_labels, classes.len(), "test")?;

    let mut warnings = Vec::new();
    for (c, label) in classes.iter().enumerate() {
        if !train_labels.contains(&c) {
            warnings.push(format!("class {label:?} absent from the training split"));
        }
    }

    let mut head = ProbeModel::zeros(d, classes.len());
    let opt_cfg = TrainConfig {
        lr: cfg.lr,
        ..TrainConfig::default()
    };
    let mut opt = OptState::new();
    for _ in 0..cfg.epochs {
        head_step(&mut head, train_embs, train_labels, &mut opt, &opt_cfg)?;
    }

    let preds = argmax_rows(&head.logits(test_embs)?)?;
    let report =
        HarReport::from_predictions(Regime::Transfer, &preds, test_labels, classes, warnings)?;
    Ok((report, head))
}

/// End-to-end classification training: encoder plus linear head under
/// softmax cross-entropy, mini-batched and seeded like contrastive training.
#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub fn finetune_classify<S: Scalar>(
    mut params: EncoderParams<S>,
    head_init: Option<ProbeModel<S>>,
    train_windows: &[Tensor<S>],
    train_labels: &[usize],
    test_windows: &[Tensor<S>],
    test_labels: &[usize],
    classes: &[String],
    cfg: &FinetuneConfig,
) -> Result<(HarReport, EncoderParams<S>, ProbeModel<S>)> {
    if classes.is_empty() {
        return Err(Error::Empty("class list"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::Config(format!(
            "lr must be positive and finite, got {}",
            cfg.lr
        )));
    }
    check_labels(train_windows.len(), train_labels, classes.len(), "train")?;
    check_labels(test_windows.len(), test_labels, classes.len(), "test")?;
    if train_windows.is_empty() {
        return Err(Error::Empty("training windows"));
    }

    let d = params.out_dim();
    let mut head = match head_init {
        Some(h) => {
            if h.w.shape() != [d, classes.len()] {
                return Err(Error::Mismatch(format!(
                    "head shape {:?} does not fit {d}-dim embeddings and {} classes",
                    h.w.shape(),
                    classes.len()
                )));
            }
            h
        }
        None => ProbeModel::zeros(d, classes.len()),
    };

    let dropout = params.kind.dropout();
    let opt_cfg = TrainConfig {
        lr: cfg.lr,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let mut opt_enc = OptState::new();
    let mut opt_head = OptState::new();
    let mut shuffle_rng = SeededRng::substream(cfg.seed, 0x6669_6e65);
    let mut dropout_rng = SeededRng::substream(cfg.seed, 0x6474_756e);
    let mut idx: Vec<usize> = (0..train_windows.len()).collect();

    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut idx);
        for (bi, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let step = (|| -> Result<()> {
                let mut tape = Tape::new();
                let vars = params.register(&mut tape);
                let hw = tape.param(head.w.clone());
                let hb = tape.param(head.b.clone());
                let mut rows = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let w = tape.constant(train_windows[i].clone());
                    rows.push(params.build(&mut tape, &vars, w, dropout, &mut dropout_rng)?);
                }
                let emb = tape.concat_rows(rows)?;
                let z = tape.matmul(emb, hw)?;
                let z = tape.add_row(z, hb)?;
                let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
                let loss_var = tape.cross_entropy(z, labels)?;
                let loss = tape.value(loss_var).item()?.to_f64();
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch: 0,
                        batch: 0,
                        reason: format!("loss {loss}"),
                    });
                }
                let mut grads = tape.backward(loss_var)?;
                let mut genc = BTreeMap::new();
                for (name, var) in &vars {
                    if let Some(g) = grads.take(*var) {
                        genc.insert(name.clone(), g);
                    }
                }
                training::update_step(&mut params.tensors, &genc, &mut opt_enc, &opt_cfg)?;
                let mut hparams = BTreeMap::new();
                hparams.insert("w".to_string(), head.w.clone());
                hparams.insert("b".to_string(), head.b.clone());
                let mut ghead = BTreeMap::new();
                if let Some(g) = grads.take(hw) {
                    ghead.insert("w".to_string(), g);
                }
                if let Some(g) = grads.take(hb) {
                    ghead.insert("b".to_string(), g);
                }
                training::update_step(&mut hparams, &ghead, &mut opt_head, &opt_cfg)?;
                head.w = hparams.remove("w").unwrap();
                head.b = hparams.remove("b").unwrap();
                Ok(())
            })();
            step.map_err(|e| match e {
                Error::NumericFailure { .. } | Error::Training { .. } => Error::Training {
                    epoch,
                    batch: bi,
                    reason: e.to_string(),
                },
                other => other,
            })?;
        }
    }

    let test_embs = training::encode_all(&params, test_windows)?;
    let preds = argmax_rows(&head.logits(&test_embs)?)?;
    let report =
        HarReport::from_predictions(Regime::Finetune, &preds, test_labels, classes, Vec::new())?;
    Ok((report, params, head))
}
