//! Recurrence prediction from six frozen-generator embeddings.
//!
//! Each view is embedded as the spatial mean of the fused bottleneck, the six
//! embeddings are averaged, standardized with training-set statistics and fed
//! to a two-layer perceptron that outputs a logit.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SofaError};
use crate::generator::{stack_images, GeneratorState};
use crate::hash::{config_hash, sha256_hex};
use crate::io::{read_json, write_json_file};
use crate::metrics::{accuracy, auc, kfold_split, MetricSummary};
use crate::nn::{device, scalar, softplus, Init, Linear, Mode, ParamStore, TensorEntry};
use crate::study::{Study, ViewId, ViewSample, NUM_VIEWS};
use crate::synth::rng_for;

pub const CLASSIFIER_FILE: &str = "clf.json";
pub const CLASSIFIER_WEIGHTS_FILE: &str = "clf.bin";
const FORMAT_VERSION: u32 = 1;
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEmbedding {
    pub view: ViewId,
    pub z: Vec<f32>,
}

/// Embeds samples in one batch with gradients off.
pub fn embed_views(samples: &[&ViewSample], gen: &GeneratorState) -> Result<Vec<ViewEmbedding>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let frozen = gen.frozen()?;
    let pre = stack_images(samples.iter().map(|s| s.pre.0.view()), gen.dtype())?;
    let feat = stack_images(
        samples.iter().map(|s| s.params.channels.view()),
        gen.dtype(),
    )?;
    let z = frozen
        .embed(&pre, &feat)?
        .to_dtype(DType::F32)?
        .to_vec2::<f32>()?;
    Ok(samples
        .iter()
        .zip(z)
        .map(|(s, z)| ViewEmbedding { view: s.view, z })
        .collect())
}

pub fn embed_view(sample: &ViewSample, gen: &GeneratorState) -> Result<ViewEmbedding> {
    Ok(embed_views(&[sample], gen)?.remove(0))
}

/// The six view embeddings of a study in canonical order.
pub fn embed_study(study: &Study, gen: &GeneratorState) -> Result<Vec<ViewEmbedding>> {
    embed_views(&study.ordered_samples()?, gen)
}

/// Element-wise arithmetic mean, accumulated in f64.
pub fn mean_vectors(vs: &[&[f32]]) -> Result<Vec<f32>> {
    let d = vs
        .first()
        .ok_or_else(|| SofaError::InvalidValue("mean of no vectors".into()))?
        .len();
    let mut acc = vec![0.0f64; d];
    for v in vs {
        if v.len() != d {
            return Err(SofaError::Shape(format!(
                "embedding length {} vs {d}",
                v.len()
            )));
        }
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += x as f64;
        }
    }
    let n = vs.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Patient vector: mean of exactly one embedding per view. The sum runs in
/// canonical view order, so any input order gives bit-identical output.
pub fn aggregate_views(zs: &[ViewEmbedding]) -> Result<Vec<f32>> {
    let mut ordered = Vec::with_capacity(NUM_VIEWS);
    for v in ViewId::ALL {
        let mut found = zs.iter().filter(|e| e.view == v);
        let e = found.next().ok_or(SofaError::MissingView(v))?;
        if found.next().is_some() {
            return Err(SofaError::InvalidValue(format!("view {v} given twice")));
        }
        ordered.push(e.z.as_slice());
    }
    if zs.len() != NUM_VIEWS {
        return Err(SofaError::Shape(format!(
            "expected {NUM_VIEWS} embeddings, got {}",
            zs.len()
        )));
    }
    mean_vectors(&ordered)
}

/// Stable `-y log s(x) - (1 - y) log(1 - s(x))` for a logit `x`.
pub fn bce_loss(logit: f64, y: u8) -> f64 {
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    softplus - y as f64 * logit
}

/// Mean of [`bce_loss`] over a batch of logits `[B]` and labels `[B]`.
pub fn bce_loss_tensor(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok((softplus(logits)? - (logits * labels)?)?.mean_all()?)
}

pub fn probability(logit: f64) -> f64 {
    1.0 / (1.0 + (-logit).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Full-batch optimizer steps.
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            learning_rate: 3e-3,
            weight_decay: 3.0,
            epochs: 300,
            folds: 5,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SofaError::Config(format!("classifier: {m}")));
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.folds == 1 {
            return bad("folds must be 0 (no cross-validation) or at least 2");
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    hidden: Linear,
    out: Linear,
    mean: Tensor,
    scale: Tensor,
}

#[derive(Clone)]
pub struct ClassifierState {
    config: ClassifierConfig,
    dim: usize,
    extractor_hash: String,
    input_mean: Vec<f32>,
    input_scale: Vec<f32>,
    store: ParamStore,
    net: Mlp,
}

impl ClassifierState {
    /// Fresh classifier with a zero output layer, so every logit starts at 0.
    pub fn new(
        dim: usize,
        cfg: &ClassifierConfig,
        extractor_hash: &str,
        input_mean: Vec<f32>,
        input_scale: Vec<f32>,
        dtype: DType,
    ) -> Result<Self> {
        cfg.validate()?;
        if input_mean.len() != dim || input_scale.len() != dim {
            return Err(SofaError::Shape(format!(
                "standardization of length {}/{} for dimension {dim}",
                input_mean.len(),
                input_scale.len()
            )));
        }
        let mut store = ParamStore::new(dtype);
        let mut init = Init::new(rng_for(cfg.seed, "classifier-init", 0));
        Linear::register(&mut store, &mut init, "clf.hidden", dim, cfg.hidden, false)?;
        Linear::register(&mut store, &mut init, "clf.out", cfg.hidden, 1, true)?;
        let net = Self::load_net(&store, &input_mean, &input_scale, Mode::Train)?;
        Ok(Self {
            config: cfg.clone(),
            dim,
            extractor_hash: extractor_hash.to_string(),
            input_mean,
            input_scale,
            store,
            net,
        })
    }

    fn load_net(store: &ParamStore, mean: &[f32], scale: &[f32], mode: Mode) -> Result<Mlp> {
        let dt = store.dtype();
        Ok(Mlp {
            hidden: Linear::load(store, "clf.hidden", mode)?,
            out: Linear::load(store, "clf.out", mode)?,
            mean: Tensor::new(mean, &device())?.to_dtype(dt)?,
            scale: Tensor::new(scale, &device())?.to_dtype(dt)?,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn extractor_hash(&self) -> &str {
        &self.extractor_hash
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn hash(&self) -> Result<String> {
        self.store.hash()
    }

    pub fn frozen(&self) -> Result<Self> {
        Ok(Self {
            net: Self::load_net(
                &self.store,
                &self.input_mean,
                &self.input_scale,
                Mode::Frozen,
            )?,
            ..self.clone()
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let out = Self::new(
            self.dim,
            &self.config,
            &self.extractor_hash,
            self.input_mean.clone(),
            self.input_scale.clone(),
            dtype,
        )?;
        out.store.load_from(&self.store)?;
        Ok(out)
    }

    /// Rejects a generator other than the one this classifier was trained on.
    pub fn check_extractor(&self, gen: &GeneratorState) -> Result<()> {
        let found = gen.hash()?;
        if found != self.extractor_hash {
            return Err(SofaError::HashMismatch {
                expected: self.extractor_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// `[B, D] -> [B]` logits.
    pub fn logits(&self, z_bar: &Tensor) -> Result<Tensor> {
        let d = z_bar.dims();
        if d.len() != 2 || d[1] != self.dim {
            return Err(SofaError::Shape(format!(
                "classifier expects [B, {}], got {d:?}",
                self.dim
            )));
        }
        let x = z_bar
            .broadcast_sub(&self.net.mean)?
            .broadcast_div(&self.net.scale)?;
        let h = self.net.hidden.forward(&x)?.silu()?;
        Ok(self.net.out.forward(&h)?.squeeze(1)?)
    }

    pub fn save(&self, dir: &Path, report: Option<&Phase2Report>) -> Result<String> {
        std::fs::create_dir_all(dir)?;
        let (blob, tensors) = self.store.to_blob()?;
        std::fs::write(dir.join(CLASSIFIER_WEIGHTS_FILE), &blob)?;
        let hash = self.hash()?;
        let ckpt = ClassifierCheckpoint {
            format_version: FORMAT_VERSION,
            kind: "classifier".into(),
            config_hash: self.config.hash()?,
            config: self.config.clone(),
            dim: self.dim,
            seed: self.config.seed,
            extractor_hash: self.extractor_hash.clone(),
            input_mean: self.input_mean.clone(),
            input_scale: self.input_scale.clone(),
            model_hash: hash.clone(),
            blob_sha256: sha256_hex(&blob),
            report: report.cloned(),
            tensors,
        };
        write_json_file(&dir.join(CLASSIFIER_FILE), &ckpt)?;
        Ok(hash)
    }

    pub fn load(dir: &Path) -> Result<(Self, ClassifierCheckpoint)> {
        let path = dir.join(CLASSIFIER_FILE);
        let ckpt: ClassifierCheckpoint = read_json(&path)?;
        if ckpt.kind != "classifier" || ckpt.format_version != FORMAT_VERSION {
            return Err(SofaError::Format {
                path: path.display().to_string(),
                reason: format!("not a v{FORMAT_VERSION} classifier checkpoint"),
            });
        }
        let blob = std::fs::read(dir.join(CLASSIFIER_WEIGHTS_FILE))?;
        let found = sha256_hex(&blob);
        if found != ckpt.blob_sha256 {
            return Err(SofaError::HashMismatch {
                expected: ckpt.blob_sha256.clone(),
                found,
            });
        }
        let state = Self::new(
            ckpt.dim,
            &ckpt.config,
            &ckpt.extractor_hash,
            ckpt.input_mean.clone(),
            ckpt.input_scale.clone(),
            DType::F32,
        )?;
        state.store.load_blob(&blob, &ckpt.tensors)?;
        Ok((state, ckpt))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub config: ClassifierConfig,
    pub dim: usize,
    pub seed: u64,
    pub extractor_hash: String,
    pub input_mean: Vec<f32>,
    pub input_scale: Vec<f32>,
    pub model_hash: String,
    pub blob_sha256: String,
    pub report: Option<Phase2Report>,
    pub tensors: Vec<TensorEntry>,
}

/// Logit for one patient vector.
pub fn predict_logit(z_bar: &[f32], clf: &ClassifierState) -> Result<f64> {
    if z_bar.len() != clf.dim() {
        return Err(SofaError::Shape(format!(
            "patient vector of length {} for classifier dimension {}",
            z_bar.len(),
            clf.dim()
        )));
    }
    let z = Tensor::from_slice(z_bar, (1, z_bar.len()), &device())?.to_dtype(clf.dtype())?;
    scalar(&clf.frozen()?.logits(&z)?)
}

/// Logits for many patient vectors in one pass.
pub fn predict_logits(z_bars: &[Vec<f32>], clf: &ClassifierState) -> Result<Vec<f64>> {
    if z_bars.is_empty() {
        return Ok(Vec::new());
    }
    let z = stack_vectors(z_bars, clf.dtype())?;
    Ok(clf
        .frozen()?
        .logits(&z)?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}

fn stack_vectors(vs: &[Vec<f32>], dtype: DType) -> Result<Tensor> {
    let d = vs[0].len();
    if vs.iter().any(|v| v.len() != d) {
        return Err(SofaError::Shape("patient vectors differ in length".into()));
    }
    let flat: Vec<f32> = vs.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (vs.len(), d), &device())?.to_dtype(dtype)?)
}

/// Per-dimension mean and population std, the std floored at a small value.
fn standardization(vs: &[Vec<f32>]) -> (Vec<f32>, Vec<f32>) {
    let d = vs[0].len();
    let n = vs.len() as f64;
    let mut mean = vec![0.0f64; d];
    for v in vs {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x as f64 / n;
        }
    }
    let mut var = vec![0.0f64; d];
    for v in vs {
        for ((s, &x), m) in var.iter_mut().zip(v).zip(&mean) {
            *s += (x as f64 - m).powi(2) / n;
        }
    }
    (
        mean.iter().map(|&m| m as f32).collect(),
        var.iter()
            .map(|&s| s.sqrt().max(SCALE_FLOOR) as f32)
            .collect(),
    )
}

/// Fits a classifier on precomputed patient vectors by full-batch AdamW.
/// Returns the state and the final training loss.
pub fn fit_classifier(
    z_bars: &[Vec<f32>],
    labels: &[u8],
    cfg: &ClassifierConfig,
    extractor_hash: &str,
) -> Result<(ClassifierState, f64)> {
    cfg.validate()?;
    if z_bars.is_empty() || z_bars.len() != labels.len() {
        return Err(SofaError::InvalidValue(format!(
            "{} vectors for {} labels",
            z_bars.len(),
            labels.len()
        )));
    }
    let (mean, scale) = standardization(z_bars);
    let clf = ClassifierState::new(
        z_bars[0].len(),
        cfg,
        extractor_hash,
        mean,
        scale,
        DType::F32,
    )?;
    let x = stack_vectors(z_bars, DType::F32)?;
    let y = Tensor::from_iter(labels.iter().map(|&l| l as f32), &device())?;
    let mut opt = AdamW::new(
        clf.store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    for epoch in 0..cfg.epochs {
        let loss = bce_loss_tensor(&clf.logits(&x)?, &y)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(SofaError::NonFiniteLoss {
                value,
                context: format!("classifier epoch {epoch}"),
            });
        }
        opt.backward_step(&loss)?;
    }
    let final_loss = scalar(&bce_loss_tensor(&clf.frozen()?.logits(&x)?, &y)?)?;
    Ok((clf, final_loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub auc: Option<f64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutOfFold {
    pub id: String,
    pub fold: usize,
    pub label: u8,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Report {
    pub n_studies: usize,
    pub extractor_hash: String,
    pub folds: Vec<FoldResult>,
    /// Over folds where both classes are present.
    pub auc: Option<MetricSummary>,
    pub accuracy: Option<MetricSummary>,
    /// AUC of all out-of-fold probabilities together.
    pub pooled_auc: Option<f64>,
    pub out_of_fold: Vec<OutOfFold>,
    pub final_train_loss: f64,
}

/// Patient vectors and labels of a labelled cohort.
pub fn embed_cohort(cohort: &[Study], gen: &GeneratorState) -> Result<Vec<Vec<f32>>> {
    cohort
        .iter()
        .map(|s| aggregate_views(&embed_study(s, gen)?))
        .collect()
}

fn cohort_labels(cohort: &[Study]) -> Result<Vec<u8>> {
    cohort
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| SofaError::MissingTarget(format!("{} has no label", s.id)))
        })
        .collect()
}

/// Cross-validates and then fits the classifier on the whole cohort, with the
/// generator frozen throughout.
pub fn train_phase2(
    cohort: &[Study],
    gen: &GeneratorState,
    cfg: &ClassifierConfig,
) -> Result<(ClassifierState, Phase2Report)> {
    cfg.validate()?;
    let labels = cohort_labels(cohort)?;
    let extractor_hash = gen.hash()?;
    let z = embed_cohort(cohort, gen)?;
    let (clf, report) = train_on_vectors(cohort, &z, &labels, cfg, &extractor_hash)?;
    let after = gen.hash()?;
    if after != extractor_hash {
        return Err(SofaError::HashMismatch {
            expected: extractor_hash,
            found: after,
        });
    }
    Ok((clf, report))
}

/// [`train_phase2`] on precomputed patient vectors.
pub fn train_on_vectors(
    cohort: &[Study],
    z: &[Vec<f32>],
    labels: &[u8],
    cfg: &ClassifierConfig,
    extractor_hash: &str,
) -> Result<(ClassifierState, Phase2Report)> {
    let mut folds = Vec::new();
    let mut out_of_fold = Vec::new();
    if cfg.folds >= 2 {
        let ids: Vec<String> = cohort.iter().map(|s| s.id.clone()).collect();
        let split = kfold_split(&ids, cfg.folds, cfg.seed)?;
        for (k, test_ids) in split.folds.iter().enumerate() {
            let is_test = |id: &String| test_ids.contains(id);
            let (mut tr_z, mut tr_y, mut te) = (Vec::new(), Vec::new(), Vec::new());
            for (i, s) in cohort.iter().enumerate() {
                if is_test(&s.id) {
                    te.push(i);
                } else {
                    tr_z.push(z[i].clone());
                    tr_y.push(labels[i]);
                }
            }
            let (clf, _) = fit_classifier(&tr_z, &tr_y, cfg, extractor_hash)?;
            let te_z: Vec<Vec<f32>> = te.iter().map(|&i| z[i].clone()).collect();
            let probs: Vec<f64> = predict_logits(&te_z, &clf)?
                .into_iter()
                .map(probability)
                .collect();
            let te_y: Vec<u8> = te.iter().map(|&i| labels[i]).collect();
            folds.push(FoldResult {
                fold: k,
                n_train: tr_z.len(),
                n_test: te.len(),
                auc: auc(&probs, &te_y),
                accuracy: accuracy(&probs, &te_y, 0.5),
            });
            for (&i, p) in te.iter().zip(probs) {
                out_of_fold.push(OutOfFold {
                    id: cohort[i].id.clone(),
                    fold: k,
                    label: labels[i],
                    probability: p,
                });
            }
        }
    }
    let fold_aucs: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
    let fold_accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let pooled_auc = auc(
        &out_of_fold
            .iter()
            .map(|o| o.probability)
            .collect::<Vec<_>>(),
        &out_of_fold.iter().map(|o| o.label).collect::<Vec<_>>(),
    );
    let (clf, final_train_loss) = fit_classifier(z, labels, cfg, extractor_hash)?;
    let report = Phase2Report {
        n_studies: cohort.len(),
        extractor_hash: extractor_hash.to_string(),
        folds,
        auc: (!fold_aucs.is_empty()).then(|| MetricSummary::from_folds(fold_aucs)),
        accuracy: (!fold_accs.is_empty()).then(|| MetricSummary::from_folds(fold_accs)),
        pooled_auc,
        out_of_fold,
        final_train_loss,
    };
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(view: ViewId, z: Vec<f32>) -> ViewEmbedding {
        ViewEmbedding { view, z }
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.0, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(0.0, 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(2.0, 1) - 0.126928).abs() < 1e-6);
        assert!(bce_loss(800.0, 0).is_finite());
        assert_eq!(bce_loss(-800.0, 0), 0.0);
    }

    #[test]
    fn bce_tensor_matches_scalar_form() {
        let logits = [-3.0, -0.2, 0.0, 1.5, 40.0];
        let labels = [1u8, 0, 1, 0, 1];
        let t = Tensor::new(&logits, &device()).unwrap();
        let y = Tensor::new(&labels.map(|v| v as f64), &device()).unwrap();
        let got = scalar(&bce_loss_tensor(&t, &y).unwrap()).unwrap();
        let want: f64 = logits
            .iter()
            .zip(labels)
            .map(|(&x, y)| {
                // Direct log form is accurate away from saturation.
                let p = 1.0 / (1.0 + f64::exp(-x));
                if y == 1 {
                    -p.ln()
                } else if x > 30.0 {
                    x
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / logits.len() as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn mean_toy() {
        let m = mean_vectors(&[&[1.0, 3.0], &[3.0, 1.0]]).unwrap();
        assert_eq!(m, vec![2.0, 2.0]);
    }

    #[test]
    fn aggregate_of_equal_vectors_is_that_vector() {
        let v = vec![0.3, -1.25, 7.0];
        let zs: Vec<_> = ViewId::ALL.iter().map(|&w| emb(w, v.clone())).collect();
        assert_eq!(aggregate_views(&zs).unwrap(), v);
    }

    #[test]
    fn aggregate_rejects_missing_and_duplicate_views() {
        let mut zs: Vec<_> = ViewId::ALL.iter().map(|&w| emb(w, vec![1.0])).collect();
        let last = zs.pop().unwrap();
        assert!(matches!(
            aggregate_views(&zs),
            Err(SofaError::MissingView(v)) if v == last.view
        ));
        zs.push(emb(ViewId::ALL[0], vec![1.0]));
        assert!(aggregate_views(&zs).is_err());
    }

    #[test]
    fn zero_output_layer_gives_even_odds() {
        let clf = ClassifierState::new(
            3,
            &ClassifierConfig::default(),
            "x",
            vec![0.0; 3],
            vec![1.0; 3],
            DType::F32,
        )
        .unwrap();
        let logit = predict_logit(&[0.4, -2.0, 9.0], &clf).unwrap();
        assert_eq!(logit, 0.0);
        assert_eq!(probability(logit), 0.5);
        assert!(predict_logit(&[0.4, -2.0], &clf).is_err());
    }

    #[test]
    fn fit_separates_a_linear_toy_problem() {
        let z: Vec<Vec<f32>> = (0..40)
            .map(|i| vec![i as f32 / 40.0, ((i * 7) % 5) as f32])
            .collect();
        let y: Vec<u8> = (0..40).map(|i| u8::from(i >= 20)).collect();
        let (clf, loss) = fit_classifier(&z, &y, &ClassifierConfig::default(), "x").unwrap();
        let probs: Vec<f64> = predict_logits(&z, &clf)
            .unwrap()
            .into_iter()
            .map(probability)
            .collect();
        assert!(loss < 0.3, "{loss}");
        assert!(auc(&probs, &y).unwrap() > 0.97);
        let (again, _) = fit_classifier(&z, &y, &ClassifierConfig::default(), "x").unwrap();
        assert_eq!(clf.hash().unwrap(), again.hash().unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let z: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 1.0 - i as f32]).collect();
        let y: Vec<u8> = (0..10).map(|i| u8::from(i % 3 == 0)).collect();
        let cfg = ClassifierConfig {
            epochs: 5,
            ..Default::default()
        };
        let (clf, _) = fit_classifier(&z, &y, &cfg, "abc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let hash = clf.save(dir.path(), None).unwrap();
        let (back, ckpt) = ClassifierState::load(dir.path()).unwrap();
        assert_eq!(ckpt.model_hash, hash);
        assert_eq!(back.hash().unwrap(), hash);
        assert_eq!(back.extractor_hash(), "abc");
        assert_eq!(
            predict_logits(&z, &clf).unwrap(),
            predict_logits(&z, &back).unwrap()
        );
        let bin = dir.path().join(CLASSIFIER_WEIGHTS_FILE);
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(
            ClassifierState::load(dir.path()),
            Err(SofaError::HashMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn aggregate_is_order_invariant(
            vals in proptest::collection::vec(-1e3f32..1e3, 18),
            perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()
        ) {
            let zs: Vec<_> = ViewId::ALL
                .iter()
                .enumerate()
                .map(|(i, &v)| emb(v, vals[3 * i..3 * i + 3].to_vec()))
                .collect();
            let shuffled: Vec<_> = perm.iter().map(|&i| zs[i].clone()).collect();
            let a = aggregate_views(&zs).unwrap();
            let b = aggregate_views(&shuffled).unwrap();
            prop_assert_eq!(
                a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn bce_monotone_and_convex(x in -30.0f64..30.0, h in 0.01f64..1.0) {
            prop_assert!(bce_loss(x + h, 1) < bce_loss(x, 1));
            prop_assert!(bce_loss(x + h, 0) > bce_loss(x, 0));
            for y in [0u8, 1] {
                let mid = bce_loss(x, y);
                prop_assert!(bce_loss(x - h, y) + bce_loss(x + h, y) >= 2.0 * mid - 1e-12);
            }
        }

        #[test]
        fn bce_gradient_is_probability_minus_label(x in -20.0f64..20.0, y in 0u8..2) {
            let t = candle_core::Var::new(&[x], &device()).unwrap();
            let lab = Tensor::new(&[y as f64], &device()).unwrap();
            let loss = bce_loss_tensor(t.as_tensor(), &lab).unwrap();
            let g = loss.backward().unwrap();
            let got = g.get(t.as_tensor()).unwrap().to_vec1::<f64>().unwrap()[0];
            prop_assert!((got - (probability(x) - y as f64)).abs() < 1e-8);
        }
    }
}
