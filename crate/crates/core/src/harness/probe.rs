//! Downstream evaluation on labelled clips.
//!
//! Both probes train a zero-initialized softmax classifier with full-batch
//! Adam on frames of the training videos and report on held-out videos.
//! Videos are dealt into stratified folds; each fold is tested once by a
//! classifier trained on the others, and the confusion matrices are summed.
//! No video is ever split across train and test.

use std::sync::Arc;

use super::checkpoint::Checkpoint;
use super::config::ProbeConfig;
use super::train::streams;
use crate::data::{extract_all, Image, VideoClip};
use crate::error::{Error, Result};
use crate::meta::Adam;
use crate::nets::{conv_features, encode, ModelParams};
use crate::tensor::{CustomOp, ParamSet, Rng, Tape, Tensor};

/// Classification metrics; sensitivity and specificity are one-vs-rest.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub n_classes: usize,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ProbeReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("confusion matrix must be square and non-empty"));
        }
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
        let mut sensitivity = Vec::with_capacity(c);
        let mut specificity = Vec::with_capacity(c);
        let mut f1 = Vec::with_capacity(c);
        for k in 0..c {
            let tp = confusion[k][k];
            let fn_: usize = confusion[k].iter().sum::<usize>() - tp;
            let fp: usize = (0..c).map(|r| confusion[r][k]).sum::<usize>() - tp;
            let tn = total - tp - fn_ - fp;
            sensitivity.push(ratio(tp, tp + fn_));
            specificity.push(ratio(tn, tn + fp));
            f1.push(ratio(2 * tp, 2 * tp + fp + fn_));
        }
        let macro_f1 = f1.iter().sum::<f64>() / c as f64;
        Ok(ProbeReport {
            n_classes: c,
            confusion,
            accuracy: ratio(correct, total),
            sensitivity,
            specificity,
            f1,
            macro_f1,
        })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        let mut m = vec![vec![0; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::invalid(format!("label out of range for {n_classes} classes")));
            }
            m[t][p] += 1;
        }
        Self::from_confusion(m)
    }
}

/// Mean softmax cross-entropy of `[B, C]` logits against fixed labels.
#[derive(Debug)]
struct SoftmaxCrossEntropy {
    labels: Vec<usize>,
}

fn softmax_row(row: &[f64]) -> (Vec<f64>, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    (e.iter().map(|v| v / s).collect(), max + s.ln())
}

impl CustomOp for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let b = x.rows();
        let mut total = 0.0;
        for (r, &y) in self.labels.iter().enumerate() {
            let (_, lse) = softmax_row(x.row(r));
            total += lse - x.row(r)[y];
        }
        Tensor::scalar(total / b as f64)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let b = x.rows();
        let g = grad.item() / b as f64;
        let mut out = Vec::with_capacity(x.len());
        for (r, &y) in self.labels.iter().enumerate() {
            let (p, _) = softmax_row(x.row(r));
            out.extend(p.iter().enumerate().map(|(k, pk)| g * (pk - if k == y { 1.0 } else { 0.0 })));
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), out)?)])
    }
}

struct LabelledFrames {
    /// Video index per frame.
    video: Vec<usize>,
    images: Vec<Image>,
    labels: Vec<usize>,
    /// Class per video.
    video_class: Vec<usize>,
    n_classes: usize,
}

fn labelled_frames(clips: &[VideoClip], samples_per_second: f64) -> Result<LabelledFrames> {
    let mut video_class = Vec::with_capacity(clips.len());
    for c in clips {
        let class = c
            .latent_class
            .ok_or_else(|| Error::invalid(format!("video {} has no class label", c.video_id)))?;
        video_class.push(class);
    }
    let n_classes = video_class.iter().max().map_or(0, |m| m + 1);
    if n_classes < 2 {
        return Err(Error::invalid("probing needs at least two classes"));
    }
    let sets = extract_all(clips, samples_per_second)?;
    let mut out = LabelledFrames {
        video: Vec::new(),
        images: Vec::new(),
        labels: Vec::new(),
        video_class,
        n_classes,
    };
    for (v, fs) in sets.iter().enumerate() {
        for img in fs.frames() {
            out.video.push(v);
            out.images.push(img.clone());
            out.labels.push(out.video_class[v]);
        }
    }
    Ok(out)
}

/// Stratified fold index per video: each class's videos are shuffled and
/// dealt round-robin, continuing the deal across classes.
pub fn stratified_video_folds(video_class: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least two folds, got {folds}")));
    }
    let n_classes = video_class.iter().max().map_or(0, |m| m + 1);
    let mut rng = Rng::stream(seed, streams::PROBE);
    let mut fold = vec![0; video_class.len()];
    let mut next = 0;
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..video_class.len()).filter(|&v| video_class[v] == c).collect();
        if members.len() < folds {
            return Err(Error::invalid(format!(
                "class {c} has {} videos, fewer than {folds} folds",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        for v in members {
            fold[v] = next % folds;
            next += 1;
        }
    }
    Ok(fold)
}

fn gather_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let cols = x.len() / x.rows();
    let data = rows.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), cols], data).expect("rows of a finite tensor")
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Optional trainable encoder head in front of the classifier.
struct Head {
    w: Tensor,
    b: Tensor,
}

struct Fitted {
    head: Option<Head>,
    cls: ParamSet,
}

fn logits(tape: &mut Tape, vars: &[crate::tensor::Var], has_head: bool, x: crate::tensor::Var) -> Result<crate::tensor::Var> {
    let mut h = x;
    let mut k = 0;
    if has_head {
        h = tape.matmul(h, vars[0])?;
        h = tape.add_bias(h, vars[1])?;
        k = 2;
    }
    let o = tape.matmul(h, vars[k])?;
    tape.add_bias(o, vars[k + 1])
}

fn fit(x: &Tensor, labels: &[usize], n_classes: usize, head: Option<Head>, cfg: &ProbeConfig) -> Result<Fitted> {
    let has_head = head.is_some();
    let mut params = ParamSet::new();
    if let Some(h) = &head {
        params.push("enc.w", h.w.clone());
        params.push("enc.b", h.b.clone());
    }
    let width = match &head {
        Some(h) => h.w.shape()[1],
        None => x.len() / x.rows(),
    };
    params.push("cls.w", Tensor::zeros(&[width, n_classes]));
    params.push("cls.b", Tensor::zeros(&[n_classes]));
    let mut adam = Adam::new(&params, cfg.lr, 0.0);
    let op = Arc::new(SoftmaxCrossEntropy { labels: labels.to_vec() });
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, 0)?;
        let xv = tape.constant(x.clone());
        let o = logits(&mut tape, &vars, has_head, xv)?;
        let loss = tape.custom(op.clone(), &[o])?;
        let grads = params.gradients_from(&tape.backward(loss)?, 0)?;
        adam.step(&mut params, &grads)?;
    }
    let head = if has_head {
        Some(Head {
            w: params.get(0).clone(),
            b: params.get(1).clone(),
        })
    } else {
        None
    };
    let k = params.len() - 2;
    let mut cls = ParamSet::new();
    cls.push("cls.w", params.get(k).clone());
    cls.push("cls.b", params.get(k + 1).clone());
    Ok(Fitted { head, cls })
}

fn predict(fitted: &Fitted, x: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    if let Some(h) = &fitted.head {
        vars.push(tape.constant(h.w.clone()));
        vars.push(tape.constant(h.b.clone()));
    }
    vars.extend(fitted.cls.register_const(&mut tape));
    let xv = tape.constant(x.clone());
    let o = logits(&mut tape, &vars, fitted.head.is_some(), xv)?;
    let out = tape.value(o)?;
    Ok((0..out.rows()).map(|r| argmax(out.row(r))).collect())
}

/// Frame indices of (train, test) for every fold.
fn fold_splits(lf: &LabelledFrames, cfg: &ProbeConfig) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let fold = stratified_video_folds(&lf.video_class, cfg.folds, cfg.seed)?;
    Ok((0..cfg.folds)
        .map(|f| (0..lf.images.len()).partition(|&i| fold[lf.video[i]] != f))
        .collect())
}

fn add_into(total: &mut [Vec<usize>], part: &ProbeReport) {
    for (row, prow) in total.iter_mut().zip(&part.confusion) {
        for (a, b) in row.iter_mut().zip(prow) {
            *a += b;
        }
    }
}

fn features_in_chunks(images: &[Image], f: impl Fn(&[&Image]) -> Result<Tensor>) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut cols = 0;
    for chunk in images.chunks(64) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let t = f(&refs)?;
        cols = t.len() / t.rows();
        rows.extend_from_slice(t.data());
    }
    Tensor::new(vec![images.len(), cols], rows)
}

fn labels_of(lf: &LabelledFrames, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| lf.labels[i]).collect()
}

/// Linear softmax classifier on the frozen representation `h`.
pub fn linear_probe(ckpt: &Checkpoint, clips: &[VideoClip], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let arch = &ckpt.config.arch;
    let lf = labelled_frames(clips, ckpt.config.samples_per_second)?;
    let h = features_in_chunks(&lf.images, |imgs| encode(&ckpt.theta_m, arch, imgs))?;
    let mut confusion = vec![vec![0; lf.n_classes]; lf.n_classes];
    for (train, test) in fold_splits(&lf, cfg)? {
        let fitted = fit(&gather_rows(&h, &train), &labels_of(&lf, &train), lf.n_classes, None, cfg)?;
        let pred = predict(&fitted, &gather_rows(&h, &test))?;
        add_into(&mut confusion, &ProbeReport::from_predictions(&labels_of(&lf, &test), &pred, lf.n_classes)?);
    }
    ProbeReport::from_confusion(confusion)
}

pub const REPORT_HEADER: [&str; 3] = ["metric", "class", "value"];

/// Long-form report: overall rows leave `class` empty, confusion rows are
/// named `confusion_<pred>` under the true class.
pub fn write_report_csv(report: &ProbeReport, out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    w.write_record(["accuracy", "", &report.accuracy.to_string()])?;
    w.write_record(["macro_f1", "", &report.macro_f1.to_string()])?;
    for c in 0..report.n_classes {
        let class = c.to_string();
        w.write_record(["sensitivity", &class, &report.sensitivity[c].to_string()])?;
        w.write_record(["specificity", &class, &report.specificity[c].to_string()])?;
        w.write_record(["f1", &class, &report.f1[c].to_string()])?;
        for (p, n) in report.confusion[c].iter().enumerate() {
            w.write_record([format!("confusion_{p}"), class.clone(), n.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub report: ProbeReport,
    /// Θ_m with the tuned encoder head; conv tensors are untouched.
    pub theta_m: ModelParams,
}

/// Trains the encoder's final linear layer together with the classifier on
/// cached pooled conv features; the conv stack stays frozen. The returned
/// Θ_m carries the head tuned on the last fold.
pub fn finetune_head(ckpt: &Checkpoint, clips: &[VideoClip], cfg: &ProbeConfig) -> Result<FinetuneOutput> {
    let arch = &ckpt.config.arch;
    let lf = labelled_frames(clips, ckpt.config.samples_per_second)?;
    let pooled = features_in_chunks(&lf.images, |imgs| conv_features(&ckpt.theta_m, arch, imgs))?;
    let hi = arch.head_index();
    let mut confusion = vec![vec![0; lf.n_classes]; lf.n_classes];
    let mut theta_m = ckpt.theta_m.clone();
    for (train, test) in fold_splits(&lf, cfg)? {
        let head = Head {
            w: ckpt.theta_m.0.get(hi).clone(),
            b: ckpt.theta_m.0.get(hi + 1).clone(),
        };
        let fitted = fit(
            &gather_rows(&pooled, &train),
            &labels_of(&lf, &train),
            lf.n_classes,
            Some(head),
            cfg,
        )?;
        let pred = predict(&fitted, &gather_rows(&pooled, &test))?;
        add_into(&mut confusion, &ProbeReport::from_predictions(&labels_of(&lf, &test), &pred, lf.n_classes)?);
        let tuned = fitted.head.expect("head was trained");
        *theta_m.0.tensor_mut(hi) = tuned.w;
        *theta_m.0.tensor_mut(hi + 1) = tuned.b;
    }
    Ok(FinetuneOutput {
        report: ProbeReport::from_confusion(confusion)?,
        theta_m,
    })
}
