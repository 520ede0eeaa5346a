//! Symbolic-music quality metrics and the compression ablation harness.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::corpus::{condition_consistency, template_onsets, vocab, Condition, CorpusSplits, TokenSequence};
use crate::decode::{generate_batch, SampleConfig};
use crate::error::{Error, Result};
use crate::model::{Component, ModelSpec, ModelWeights};
use crate::quant::{apply_plan, size_report, Precision, QuantPlan};
use crate::tensor::RealVec;
use crate::train::{distill, mean_cross_entropy, train_from, TrainConfig};

pub const FEATURE_DIM: usize = 16;
/// Ridge added to estimated covariances.
pub const COV_RIDGE: f64 = 1e-6;
const NEG_EIG_TOL: f64 = 1e-8;
const N_FAMILIES: u8 = 4;

/// Pitch-class histogram (12), note density, mean absolute interval in
/// octaves, best cosine match of the onset grid against the rhythm
/// templates, and the fraction of 4-grams seen earlier in the sequence.
pub fn extract_features(seq: &TokenSequence) -> Result<RealVec> {
    let toks = &seq.tokens;
    if toks.is_empty() {
        return Err(Error::invalid("cannot extract features from an empty sequence"));
    }
    let mut f = vec![0.0; FEATURE_DIM];
    let pitches: Vec<u32> = toks.iter().copied().filter(|&t| vocab::is_pitch(t)).collect();
    for &p in &pitches {
        f[(p % 12) as usize] += 1.0;
    }
    if !pitches.is_empty() {
        f[..12].iter_mut().for_each(|v| *v /= pitches.len() as f64);
    }
    f[12] = pitches.len() as f64 / toks.len() as f64;
    if pitches.len() >= 2 {
        let total: f64 = pitches.windows(2).map(|w| (w[1] as f64 - w[0] as f64).abs()).sum();
        f[13] = total / (pitches.len() - 1) as f64 / 12.0;
    }
    f[14] = rhythm_match(toks);
    if toks.len() > 4 {
        let grams: Vec<&[u32]> = toks.windows(4).collect();
        let repeats = (1..grams.len()).filter(|&i| grams[..i].contains(&grams[i])).count();
        f[15] = repeats as f64 / grams.len() as f64;
    }
    RealVec::new(f)
}

fn rhythm_match(toks: &[u32]) -> f64 {
    let steps = vocab::STEPS_PER_BAR;
    let mut hist = [0.0f64; 16];
    let (mut step, mut dur) = (0u32, 1u32);
    for &t in toks {
        if t == vocab::BAR {
            step = 0;
        } else if let Some(d) = vocab::duration_of(t) {
            dur = d;
        } else if vocab::is_pitch(t) || t == vocab::REST {
            if vocab::is_pitch(t) {
                hist[(step % steps) as usize] += 1.0;
            }
            step += dur;
        }
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    (0..N_FAMILIES)
        .map(|fam| {
            let t = template_onsets(fam);
            let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            hist.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / (norm * tn)
        })
        .fold(0.0, f64::max)
}

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::invalid(format!(
                "mean of dimension {d} with {} covariance entries",
                cov.len()
            )));
        }
        crate::tensor::ensure_finite(&mean, "mean")?;
        crate::tensor::ensure_finite(&cov, "covariance")?;
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-9 {
                    return Err(Error::invalid(format!("covariance is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { mean, cov, count })
    }

    /// Sample mean and unbiased covariance plus `COV_RIDGE * I`.
    pub fn from_features(features: &[RealVec]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 feature vectors, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::invalid("feature vectors differ in dimension"));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            crate::tensor::add_assign(&mut mean, f.as_slice());
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for f in features {
            let c: Vec<f64> = f.as_slice().iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        for i in 0..d {
            cov[i * d + i] += COV_RIDGE;
        }
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Whether there are enough samples for a full-rank covariance estimate.
    pub fn is_full_rank_estimate(&self) -> bool {
        self.count > self.dim()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

/// Eigenvalues of a symmetric matrix, clamping tiny negatives to zero.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -NEG_EIG_TOL {
            return Err(Error::invalid(format!("{what} has negative eigenvalue {v}")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("dimension {} vs {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = psd_sqrt(sa.clone(), "first covariance")?;
    psd_eigen(sb.clone(), "second covariance")?;
    let inner = &root_a * &sb * &root_a;
    let cross: f64 = psd_eigen(inner, "covariance product")?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if d < -NEG_EIG_TOL {
        return Err(Error::Evaluation(format!("negative distance {d}")));
    }
    Ok(d.max(0.0))
}

/// One row of the ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub name: String,
    pub distill: bool,
    pub plan: Option<QuantPlan>,
}

impl AblationConfig {
    /// Baseline, KD only, quantization only, KD plus quantization.
    pub fn standard(plan: QuantPlan) -> Vec<Self> {
        let cfg = |name: &str, distill, plan: Option<&QuantPlan>| Self {
            name: name.into(),
            distill,
            plan: plan.cloned(),
        };
        vec![
            cfg("baseline", false, None),
            cfg("kd", true, None),
            cfg("quant", false, Some(&plan)),
            cfg("kd+quant", true, Some(&plan)),
        ]
    }
}

/// Shared settings of every ablation row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSettings {
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub n_sequences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: String,
    pub frechet: f64,
    pub consistency: f64,
    pub bytes_by_component: BTreeMap<Component, u64>,
    /// Serialized checkpoint size.
    pub total_bytes: u64,
    pub compression_ratio: f64,
    /// Validation next-token cross-entropy of the evaluated weights.
    pub final_val_loss: f64,
    pub conditions: Vec<Condition>,
}

/// Evaluation conditions spread evenly over the condition grid.
pub fn evaluation_conditions(n: usize) -> Vec<Condition> {
    (0..n).map(|i| Condition::from_index(i * Condition::COUNT / n.max(1))).collect()
}

pub fn feature_stats(seqs: &[TokenSequence]) -> Result<FeatureStats> {
    let feats = seqs.iter().map(extract_features).collect::<Result<Vec<_>>>()?;
    FeatureStats::from_features(&feats)
}

/// Scores one set of weights against reference statistics.
pub fn evaluate_weights(
    name: &str,
    weights: &ModelWeights,
    plan: Option<&QuantPlan>,
    corpus: &CorpusSplits,
    reference: &FeatureStats,
    settings: &AblationSettings,
) -> Result<EvalReport> {
    let plan = plan.cloned().unwrap_or_else(|| QuantPlan::uniform(Precision::Fp32));
    let (ck, simulated) = apply_plan(weights, &plan)?;
    let sizes = size_report(&ck);
    let conditions = evaluation_conditions(settings.n_sequences);
    let seqs = generate_batch(&simulated, &conditions, &settings.sample)?;
    let generated: Vec<TokenSequence> = seqs.into_iter().filter(|s| !s.tokens.is_empty()).collect();
    let frechet = frechet_distance(&feature_stats(&generated)?, reference)?;
    let consistency = generated.iter().map(condition_consistency).sum::<f64>() / generated.len() as f64;
    Ok(EvalReport {
        config: name.to_string(),
        frechet,
        consistency,
        bytes_by_component: sizes.by_component,
        total_bytes: sizes.file_bytes,
        compression_ratio: sizes.compression_ratio,
        final_val_loss: mean_cross_entropy(&simulated, &corpus.validation.items)?,
        conditions,
    })
}

/// Trains each needed student once (cross-entropy baseline and/or
/// distilled), then evaluates every configuration on the same generated
/// condition set against the test split.
pub fn run_ablation(
    corpus: &CorpusSplits,
    teacher: &ModelWeights,
    student_spec: &ModelSpec,
    configs: &[AblationConfig],
    settings: &AblationSettings,
) -> Result<Vec<EvalReport>> {
    if configs.is_empty() {
        return Err(Error::invalid("no ablation configurations given"));
    }
    let reference = feature_stats(&corpus.test.items)?;
    let mut students: BTreeMap<bool, ModelWeights> = BTreeMap::new();
    for kd in [false, true] {
        if configs.iter().any(|c| c.distill == kd) {
            let w = if kd {
                distill(teacher, student_spec, corpus, &settings.train)?.0
            } else {
                let init = ModelWeights::init(student_spec, settings.train.seed)?;
                train_from(init, corpus, &settings.train, "baseline-ce")?.0
            };
            students.insert(kd, w);
        }
    }
    configs
        .iter()
        .map(|c| evaluate_weights(&c.name, &students[&c.distill], c.plan.as_ref(), corpus, &reference, settings))
        .collect()
}

pub fn write_ablation_csv<W: Write>(mut w: W, reports: &[EvalReport]) -> Result<()> {
    writeln!(w, "config,frechet,consistency,total_bytes,ratio,final_val_loss")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.config, r.frechet, r.consistency, r.total_bytes, r.compression_ratio, r.final_val_loss
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mean: &[f64], diag: &[f64]) -> FeatureStats {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = diag[i];
        }
        FeatureStats::new(mean.to_vec(), cov, 100).unwrap()
    }

    fn seq(tokens: Vec<u32>) -> TokenSequence {
        TokenSequence { tokens, condition: Condition::from_index(0) }
    }

    #[test]
    fn single_pitch_gives_one_hot_histogram() {
        let f = extract_features(&seq(vec![48, 53, 14, 53, 14, 53, 14])).unwrap();
        let hist = &f.as_slice()[..12];
        assert_eq!(hist[2], 1.0);
        assert_eq!(hist.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn identical_sequences_identical_features() {
        let s = seq(vec![48, 51, 3, 51, 7, 49, 52, 10]);
        assert_eq!(extract_features(&s).unwrap(), extract_features(&s.clone()).unwrap());
    }

    #[test]
    fn octave_transposition_keeps_pitch_classes() {
        let a = seq(vec![48, 51, 3, 51, 7, 51, 19]);
        let b = seq(a.tokens.iter().map(|&t| if vocab::is_pitch(t) { t + 12 } else { t }).collect());
        assert_eq!(extract_features(&a).unwrap().as_slice()[..12], extract_features(&b).unwrap().as_slice()[..12]);
    }

    #[test]
    fn template_rhythm_matches_perfectly() {
        // family 0 medium tempo: four quarter notes
        let toks = vec![48, 53, 0, 53, 2, 53, 4, 53, 5];
        assert!((extract_features(&seq(toks)).unwrap().as_slice()[14] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(extract_features(&seq(vec![])).is_err());
    }

    proptest! {
        #[test]
        fn features_are_total(tokens in prop::collection::vec(0u32..72, 1..80)) {
            let f = extract_features(&seq(tokens)).unwrap();
            prop_assert_eq!(f.len(), FEATURE_DIM);
        }
    }

    #[test]
    fn frechet_examples() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        let b = stats(&[3.0, 4.0], &[1.0, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() <= 1e-8);
        let c = stats(&[0.0, 0.0], &[4.0, 4.0]);
        assert!((frechet_distance(&c, &a).unwrap() - 2.0).abs() <= 1e-8);
        assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn frechet_rejects_bad_input() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(frechet_distance(&a, &stats(&[0.0], &[1.0])).is_err());
        let neg = stats(&[0.0, 0.0], &[1.0, -0.5]);
        assert!(matches!(frechet_distance(&a, &neg), Err(Error::InvalidArgument(_))));
        assert!(FeatureStats::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0], 3).is_err());
    }

    fn random_stats(d: usize, seed: &[f64]) -> FeatureStats {
        let feats: Vec<RealVec> = seed
            .chunks(d)
            .map(|c| RealVec::new(c.to_vec()).unwrap())
            .collect();
        FeatureStats::from_features(&feats).unwrap()
    }

    proptest! {
        #[test]
        fn frechet_symmetry_and_identity(
            xs in prop::collection::vec(-3.0f64..3.0, 4 * 12),
            ys in prop::collection::vec(-3.0f64..3.0, 4 * 9),
        ) {
            let a = random_stats(4, &xs);
            let b = random_stats(4, &ys);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8);
            prop_assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-10);
        }
    }

    #[test]
    fn estimated_stats_flag_rank() {
        let feats: Vec<RealVec> = (0..5).map(|i| RealVec::new(vec![i as f64, 1.0]).unwrap()).collect();
        let s = FeatureStats::from_features(&feats).unwrap();
        assert!(s.is_full_rank_estimate());
        assert_eq!(s.mean, vec![2.0, 1.0]);
        assert!((s.cov[0] - (2.5 + COV_RIDGE)).abs() < 1e-15);
        assert_eq!(s.cov[3], COV_RIDGE);
    }

    #[test]
    fn evaluation_grid_covers_every_attribute() {
        let conds = evaluation_conditions(64);
        assert_eq!(conds.len(), 64);
        for fam in 0..4 {
            assert!(conds.iter().any(|c| c.pattern_family == fam));
        }
        for s in 0..8 {
            assert!(conds.iter().any(|c| c.scale_id == s));
        }
    }

    #[test]
    fn csv_schema() {
        let r = EvalReport {
            config: "kd".into(),
            frechet: 1.5,
            consistency: 0.75,
            bytes_by_component: BTreeMap::new(),
            total_bytes: 100,
            compression_ratio: 0.0,
            final_val_loss: 2.0,
            conditions: vec![],
        };
        let mut out = Vec::new();
        write_ablation_csv(&mut out, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "config,frechet,consistency,total_bytes,ratio,final_val_loss\nkd,1.5,0.75,100,0,2\n"
        );
    }
}
