//! Scene-wide matching contrastive loss.
//!
//! Dictionary entries that come from the anchor's own scene are false
//! negatives. Instead of pushing them away, each one receives an adaptive soft
//! label: a temperature softmax over their similarities (`b`), scaled down by
//! how spread out that distribution is (`1 − H(b)/log n`) and capped at 1 so
//! that the anchor's own key stays the most confident positive. The loss is
//! cross-entropy between the normalized label vector and the temperature
//! softmax over `[z_q·z_k, z_q·z_1, …, z_q·z_n]`.
//!
//! Everything here works on plain `f64` slices. Labels are targets and carry
//! no gradient; [`swim_loss_tensor`] is the differentiable counterpart used
//! during training.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dataset::SceneId;
use crate::error::{Error, Result};
use crate::queue::EmbeddingQueue;

/// Logits `z_qᵀz_i` for `i = 0..=n` (index 0 is the positive key) and the
/// contrastive temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    logits: Vec<f64>,
    temperature: f64,
}

impl SimilarityRow {
    pub fn new(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::param(format!("temperature must be positive, got {temperature}")));
        }
        if logits.is_empty() {
            return Err(Error::contract("similarity row needs the positive logit"));
        }
        // cosines of unit vectors, up to single-precision rounding
        if let Some(bad) = logits.iter().find(|l| !(l.abs() <= 1.0 + 1e-5)) {
            return Err(Error::contract(format!("logit {bad} is not a cosine similarity")));
        }
        Ok(Self { logits, temperature })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    fn scaled_log_softmax(&self) -> Vec<f64> {
        let scaled: Vec<f64> = self.logits.iter().map(|l| l / self.temperature).collect();
        log_softmax(&scaled)
    }
}

/// Numerically stable log-softmax (max subtraction).
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - lse).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Queue slots sharing the anchor's scene, as 1-based label positions, and
/// their similarities to the anchor embedding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FnsSelection {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl FnsSelection {
    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Collects every queue entry whose scene equals `anchor_scene`. Similarities
/// are inner products with `anchor` (both unit-norm, so cosines).
pub fn select_fns(queue: &EmbeddingQueue, anchor_scene: &SceneId, anchor: &[f32]) -> Result<FnsSelection> {
    if anchor.len() != queue.dim() {
        return Err(Error::contract(format!(
            "anchor has dimension {}, queue holds {}",
            anchor.len(),
            queue.dim()
        )));
    }
    let mut sel = FnsSelection::default();
    for (slot, entry) in queue.iter().enumerate() {
        if &entry.scene_id == anchor_scene {
            let d: f64 = entry
                .embedding
                .iter()
                .zip(anchor)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            sel.indices.push(slot + 1);
            sel.similarities.push(d);
        }
    }
    Ok(sel)
}

/// `b_i = exp(d_i/τ′) / Σ_j exp(d_j/τ′)`.
pub fn soft_distribution(d: &[f64], tau_prime: f64) -> Result<Vec<f64>> {
    if d.is_empty() {
        return Err(Error::contract("soft distribution needs at least one false negative"));
    }
    if !(tau_prime > 0.0) {
        return Err(Error::param(format!("soft-label temperature must be positive, got {tau_prime}")));
    }
    let scaled: Vec<f64> = d.iter().map(|v| v / tau_prime).collect();
    Ok(softmax(&scaled))
}

/// Shannon entropy in nats, with `0·log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveLabels {
    /// `s_i`, aligned with the input distribution.
    pub labels: Vec<f64>,
    /// `H(b)` in nats.
    pub entropy: f64,
    /// `1 − H(b)/log n`, clamped to [0,1].
    pub scale: f64,
}

/// Scaling factors within this distance of zero are rounding residue of an
/// exactly uniform distribution and are snapped to zero.
const SCALE_FLOOR: f64 = 16.0 * f64::EPSILON;

/// `s_i = min(1, b_i · [1 − H(b)/log n])` with `log` natural.
pub fn adaptive_soft_labels(b: &[f64], n: usize) -> Result<AdaptiveLabels> {
    if n < 2 {
        return Err(Error::param(format!("entropy normalizer needs n >= 2, got {n}")));
    }
    if b.is_empty() {
        return Err(Error::contract("adaptive labels need a nonempty distribution"));
    }
    let entropy = shannon_entropy(b);
    let mut scale = (1.0 - entropy / (n as f64).ln()).clamp(0.0, 1.0);
    if scale < SCALE_FLOOR {
        scale = 0.0;
    }
    let labels = b.iter().map(|&bi| (bi * scale).min(1.0)).collect();
    Ok(AdaptiveLabels { labels, entropy, scale })
}

/// Raw relabeled vector `l′` and its normalization `l′/Σl′`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelVector {
    raw: Vec<f64>,
    target: Vec<f64>,
}

impl SoftLabelVector {
    /// Baseline target: all mass on the positive key.
    pub fn one_hot(len: usize) -> Self {
        let mut raw = vec![0.0; len.max(1)];
        raw[0] = 1.0;
        Self {
            target: raw.clone(),
            raw,
        }
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// `Σ l′`.
    pub fn mass(&self) -> f64 {
        self.raw.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// `l′_0 = 1`, `l′_i = s_i` on false-negative slots, 0 elsewhere, over a row
/// of `queue_len + 1` entries.
pub fn build_label_vector(selection: &FnsSelection, s: &[f64], queue_len: usize) -> Result<SoftLabelVector> {
    if s.len() != selection.m() || selection.similarities.len() != selection.m() {
        return Err(Error::contract(format!(
            "{} soft labels for {} false negatives",
            s.len(),
            selection.m()
        )));
    }
    let mut raw = vec![0.0; queue_len + 1];
    raw[0] = 1.0;
    for (&idx, &si) in selection.indices.iter().zip(s) {
        if idx == 0 || idx > queue_len {
            return Err(Error::contract(format!("false-negative index {idx} outside 1..={queue_len}")));
        }
        if raw[idx] != 0.0 {
            return Err(Error::contract(format!("false-negative index {idx} repeated")));
        }
        if !(0.0..=1.0).contains(&si) {
            return Err(Error::contract(format!("soft label {si} outside [0,1]")));
        }
        raw[idx] = si;
    }
    let mass: f64 = raw.iter().sum();
    let target = raw.iter().map(|v| v / mass).collect();
    Ok(SoftLabelVector { raw, target })
}

/// `L_C = −Σ_i (l′_i/Σl′) · log softmax(z_qᵀz/τ)_i`.
pub fn swim_loss(row: &SimilarityRow, labels: &SoftLabelVector) -> Result<f64> {
    if row.len() != labels.len() {
        return Err(Error::contract(format!(
            "similarity row has {} entries, labels {}",
            row.len(),
            labels.len()
        )));
    }
    let lsm = row.scaled_log_softmax();
    Ok(-labels.target.iter().zip(&lsm).map(|(t, l)| t * l).sum::<f64>())
}

/// Analytic `∂L_C/∂logit_i = (softmax_i − target_i)/τ`, labels held constant.
pub fn swim_loss_grad(row: &SimilarityRow, labels: &SoftLabelVector) -> Result<Vec<f64>> {
    if row.len() != labels.len() {
        return Err(Error::contract("similarity row and labels differ in length"));
    }
    let scaled: Vec<f64> = row.logits.iter().map(|l| l / row.temperature).collect();
    let p = softmax(&scaled);
    Ok(p.iter()
        .zip(&labels.target)
        .map(|(pi, ti)| (pi - ti) / row.temperature)
        .collect())
}

/// One-hot contrastive loss: `−log softmax(z_qᵀz/τ)_0`.
pub fn info_nce(row: &SimilarityRow) -> f64 {
    let lsm = row.scaled_log_softmax();
    -(1.0 * lsm[0])
}

/// Which embedding the false-negative similarities `d_i` are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityAnchor {
    #[default]
    Query,
    Key,
}

/// The `n` in `log n` of the entropy scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyNorm {
    /// Dictionary capacity.
    #[default]
    QueueSize,
    /// Number of false negatives found for the anchor.
    FnsCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwimConfig {
    /// When false every anchor gets the one-hot baseline target.
    pub enabled: bool,
    pub tau_prime: f64,
    pub entropy_norm: EntropyNorm,
    pub similarity_anchor: SimilarityAnchor,
}

impl Default for SwimConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau_prime: 0.05,
            entropy_norm: EntropyNorm::QueueSize,
            similarity_anchor: SimilarityAnchor::Query,
        }
    }
}

/// One batch element as seen by the relabeling step.
#[derive(Debug, Clone, Copy)]
pub struct Anchor<'a> {
    pub scene_id: &'a SceneId,
    pub z_q: &'a [f32],
    pub z_k: &'a [f32],
}

/// Per-batch relabeling statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelDiagnostics {
    /// Mean false-negative count per anchor.
    pub mean_m: f64,
    /// Mean entropy scaling factor over anchors with at least one false negative
    /// (1 when there are none).
    pub mean_scale: f64,
    /// Mean `Σl′` per anchor.
    pub mean_mass: f64,
}

/// Builds the target row of every anchor against the current queue.
pub fn build_batch_labels(
    queue: &EmbeddingQueue,
    anchors: &[Anchor<'_>],
    config: &SwimConfig,
) -> Result<(Vec<SoftLabelVector>, LabelDiagnostics)> {
    let n = queue.len();
    let mut out = Vec::with_capacity(anchors.len());
    let (mut sum_m, mut sum_scale, mut scaled, mut sum_mass) = (0usize, 0.0, 0usize, 0.0);
    for a in anchors {
        let labels = if config.enabled {
            let reference = match config.similarity_anchor {
                SimilarityAnchor::Query => a.z_q,
                SimilarityAnchor::Key => a.z_k,
            };
            let sel = select_fns(queue, a.scene_id, reference)?;
            if sel.is_empty() {
                SoftLabelVector::one_hot(n + 1)
            } else {
                let b = soft_distribution(&sel.similarities, config.tau_prime)?;
                let adaptive = match config.entropy_norm {
                    EntropyNorm::QueueSize => adaptive_soft_labels(&b, queue.capacity().max(2))?,
                    // log(1) = 0: a single false negative has zero entropy, keep full weight
                    EntropyNorm::FnsCount if sel.m() == 1 => AdaptiveLabels {
                        labels: vec![b[0].min(1.0)],
                        entropy: 0.0,
                        scale: 1.0,
                    },
                    EntropyNorm::FnsCount => adaptive_soft_labels(&b, sel.m())?,
                };
                sum_m += sel.m();
                sum_scale += adaptive.scale;
                scaled += 1;
                build_label_vector(&sel, &adaptive.labels, n)?
            }
        } else {
            SoftLabelVector::one_hot(n + 1)
        };
        sum_mass += labels.mass();
        out.push(labels);
    }
    let count = anchors.len().max(1) as f64;
    let diag = LabelDiagnostics {
        mean_m: sum_m as f64 / count,
        mean_scale: if scaled == 0 { 1.0 } else { sum_scale / scaled as f64 },
        mean_mass: sum_mass / count,
    };
    Ok((out, diag))
}

/// Differentiable batch loss: mean over rows of `−Σ_i target_i · log softmax(logits/τ)_i`.
/// `logits` and `targets` are `B×(n+1)`; targets are treated as constants.
pub fn swim_loss_tensor(logits: &Tensor, targets: &Tensor, tau: f64) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::contract(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.dims(),
            targets.dims()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::param("temperature must be positive"));
    }
    let lsm = candle_nn::ops::log_softmax(&logits.affine(1.0 / tau, 0.0)?, D::Minus1)?;
    let per_row = (targets.detach() * lsm)?.sum(D::Minus1)?.neg()?;
    Ok(per_row.mean_all()?)
}

/// Stacks label targets into a `B×(n+1)` tensor of the given dtype.
pub fn targets_tensor(labels: &[SoftLabelVector], dtype: candle_core::DType, device: &candle_core::Device) -> Result<Tensor> {
    let width = labels.first().map_or(1, SoftLabelVector::len);
    if labels.iter().any(|l| l.len() != width) {
        return Err(Error::contract("label rows differ in length"));
    }
    let flat: Vec<f64> = labels.iter().flat_map(|l| l.target.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (labels.len(), width), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(logits: &[f64], tau: f64) -> SimilarityRow {
        SimilarityRow::new(logits.to_vec(), tau).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn no_match_and_all_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut q = EmbeddingQueue::new(8, 4).unwrap();
        q.enqueue((0..5).map(|_| (random_unit(&mut rng, 4), SceneId::from("a")))).unwrap();
        let z = random_unit(&mut rng, 4);
        assert_eq!(select_fns(&q, &"b".into(), &z).unwrap().m(), 0);
        let all = select_fns(&q, &"a".into(), &z).unwrap();
        assert_eq!(all.m(), 5);
        assert_eq!(all.indices, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn selection_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = EmbeddingQueue::new(64, 8).unwrap();
        let scenes = ["x", "y", "z"];
        q.enqueue((0..64).map(|_| {
            (random_unit(&mut rng, 8), SceneId::from(scenes[rng.random_range(0..3)]))
        }))
        .unwrap();
        let z = random_unit(&mut rng, 8);
        for s in scenes {
            let sel = select_fns(&q, &s.into(), &z).unwrap();
            let mut expect_idx = Vec::new();
            let mut expect_d = Vec::new();
            for i in 0..q.len() {
                let e = q.get(i).unwrap();
                if e.scene_id.0 == s {
                    expect_idx.push(i + 1);
                    let mut d = 0.0f64;
                    for k in 0..8 {
                        d += e.embedding[k] as f64 * z[k] as f64;
                    }
                    expect_d.push(d);
                }
            }
            assert_eq!(sel.indices, expect_idx);
            for (a, b) in sel.similarities.iter().zip(&expect_d) {
                assert!((a - b).abs() < 1e-12);
                assert!(a.abs() <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn soft_distribution_cases() {
        assert_eq!(soft_distribution(&[0.3], 0.05).unwrap(), vec![1.0]);
        let u = soft_distribution(&[0.4; 5], 0.05).unwrap();
        assert!(u.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(matches!(soft_distribution(&[], 0.05), Err(Error::Contract(_))));
        assert!(matches!(soft_distribution(&[0.1], 0.0), Err(Error::Param(_))));
        assert!(matches!(soft_distribution(&[0.1], -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn soft_distribution_two_point_reference() {
        // b_1 = 1/(1+e^{-12}); reference value evaluated at 50 significant digits
        let b = soft_distribution(&[0.8, 0.2], 0.05).unwrap();
        let b1 = 0.999_993_855_825_397_8_f64;
        assert!((b[0] - b1).abs() < 1e-10);
        assert!((b[1] - (1.0 - b1)).abs() < 1e-10);
        assert!(b[0] > 0.999);
    }

    #[test]
    fn adaptive_label_cases() {
        let one = adaptive_soft_labels(&[1.0], 100).unwrap();
        assert_eq!(one.labels, vec![1.0]);
        assert_eq!(one.scale, 1.0);

        let n = 16;
        let uniform = soft_distribution(&vec![0.1; n], 0.05).unwrap();
        let a = adaptive_soft_labels(&uniform, n).unwrap();
        assert!(a.labels.iter().all(|&s| s == 0.0));
        assert_eq!(a.scale, 0.0);

        assert!(matches!(adaptive_soft_labels(&[1.0], 1), Err(Error::Param(_))));
    }

    #[test]
    fn adaptive_labels_reference_values() {
        // H([0.7,0.2,0.1]) evaluated at 50 significant digits
        let a = adaptive_soft_labels(&[0.7, 0.2, 0.1], 100).unwrap();
        let h = 0.801_818_552_543_337_3_f64;
        let scale = 1.0 - h / 100f64.ln();
        assert!((a.entropy - h).abs() < 1e-12);
        for (s, b) in a.labels.iter().zip([0.7, 0.2, 0.1]) {
            assert!((s - b * scale).abs() < 1e-10);
        }
    }

    #[test]
    fn label_vector_cases() {
        let empty = build_label_vector(&FnsSelection::default(), &[], 4).unwrap();
        assert_eq!(empty.target(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(empty, SoftLabelVector::one_hot(5));

        let sel = FnsSelection {
            indices: vec![3],
            similarities: vec![0.5],
        };
        let lv = build_label_vector(&sel, &[1.0], 4).unwrap();
        assert_eq!(lv.target(), &[0.5, 0.0, 0.0, 0.5, 0.0]);

        assert!(matches!(build_label_vector(&sel, &[], 4), Err(Error::Contract(_))));
        let out_of_range = FnsSelection {
            indices: vec![5],
            similarities: vec![0.5],
        };
        assert!(build_label_vector(&out_of_range, &[0.5], 4).is_err());
    }

    #[test]
    fn loss_uniform_logits_is_log_len() {
        let n = 8;
        let r = row(&vec![0.3; n + 1], 0.1);
        let l = swim_loss(&r, &SoftLabelVector::one_hot(n + 1)).unwrap();
        assert!((l - ((n + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_positive_logit_reference() {
        let mut logits = vec![0.0; 9];
        logits[0] = 1.0;
        let l = swim_loss(&row(&logits, 0.1), &SoftLabelVector::one_hot(9)).unwrap();
        // −log(e^10/(e^10+8)) at 50 significant digits
        let expect = 3.631_334_971_499_549_3e-4_f64;
        assert!((l - expect).abs() < 1e-15, "{l}");
    }

    #[test]
    fn loss_against_own_softmax_is_entropy() {
        let r = row(&[0.2, -0.4, 0.9, 0.1], 0.5);
        let p: Vec<f64> = r.scaled_log_softmax().iter().map(|v| v.exp()).collect();
        let labels = SoftLabelVector {
            raw: p.clone(),
            target: p.clone(),
        };
        let l = swim_loss(&r, &labels).unwrap();
        assert!((l - shannon_entropy(&p)).abs() < 1e-12);
    }

    #[test]
    fn loss_length_mismatch() {
        let r = row(&[0.1, 0.2], 0.1);
        assert!(matches!(
            swim_loss(&r, &SoftLabelVector::one_hot(3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn one_hot_path_is_bitwise_info_nce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(0..40);
            let logits: Vec<f64> = (0..=n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = row(&logits, rng.random_range(0.05..1.0));
            let labels = build_label_vector(&FnsSelection::default(), &[], n).unwrap();
            assert_eq!(swim_loss(&r, &labels).unwrap().to_bits(), info_nce(&r).to_bits());
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(1..12);
            let logits: Vec<f64> = (0..=n).map(|_| rng.random_range(-0.9..0.9)).collect();
            let mut raw: Vec<f64> = (0..=n).map(|_| if rng.random_bool(0.3) { rng.random() } else { 0.0 }).collect();
            raw[0] = 1.0;
            let mass: f64 = raw.iter().sum();
            let labels = SoftLabelVector {
                target: raw.iter().map(|v| v / mass).collect(),
                raw,
            };
            let tau = rng.random_range(0.1..1.0);
            let g = swim_loss_grad(&row(&logits, tau), &labels).unwrap();
            let h = 1e-6;
            for i in 0..=n {
                let mut up = logits.clone();
                let mut dn = logits.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (swim_loss(&SimilarityRow { logits: up, temperature: tau }, &labels).unwrap()
                    - swim_loss(&SimilarityRow { logits: dn, temperature: tau }, &labels).unwrap())
                    / (2.0 * h);
                let rel = (fd - g[i]).abs() / g[i].abs().max(1e-8);
                assert!(rel < 1e-4 || (fd - g[i]).abs() < 1e-8, "i={i} fd={fd} an={}", g[i]);
            }
        }
    }

    #[test]
    fn batch_labels_respect_switches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = EmbeddingQueue::new(10, 4).unwrap();
        q.enqueue((0..6).map(|i| (random_unit(&mut rng, 4), SceneId(format!("s{}", i % 2))))).unwrap();
        let zq = random_unit(&mut rng, 4);
        let zk = random_unit(&mut rng, 4);
        let scene = SceneId::from("s0");
        let anchors = [Anchor { scene_id: &scene, z_q: &zq, z_k: &zk }];

        let mut cfg = SwimConfig::default();
        let (labels, diag) = build_batch_labels(&q, &anchors, &cfg).unwrap();
        assert_eq!(labels[0].len(), 7);
        assert_eq!(diag.mean_m, 3.0);
        assert!((labels[0].target().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(diag.mean_mass > 1.0);

        cfg.similarity_anchor = SimilarityAnchor::Key;
        let (by_key, _) = build_batch_labels(&q, &anchors, &cfg).unwrap();
        assert_ne!(by_key[0], labels[0]);

        cfg.entropy_norm = EntropyNorm::FnsCount;
        let (_, d) = build_batch_labels(&q, &anchors, &cfg).unwrap();
        assert!(d.mean_scale <= 1.0 && d.mean_scale >= 0.0);

        cfg.enabled = false;
        let (off, diag) = build_batch_labels(&q, &anchors, &cfg).unwrap();
        assert_eq!(off[0], SoftLabelVector::one_hot(7));
        assert_eq!(diag.mean_m, 0.0);
    }

    #[test]
    fn tensor_loss_matches_scalar_loss() {
        let dev = candle_core::Device::Cpu;
        let logits = vec![vec![0.5, -0.2, 0.1, 0.7], vec![0.9, 0.3, -0.5, 0.0]];
        let sel = FnsSelection { indices: vec![2], similarities: vec![0.3] };
        let labels = vec![
            SoftLabelVector::one_hot(4),
            build_label_vector(&sel, &[0.4], 3).unwrap(),
        ];
        let lt = Tensor::new(logits.clone(), &dev).unwrap();
        let tt = targets_tensor(&labels, candle_core::DType::F64, &dev).unwrap();
        let got = swim_loss_tensor(&lt, &tt, 0.1).unwrap().to_scalar::<f64>().unwrap();
        let expect = (swim_loss(&row(&logits[0], 0.1), &labels[0]).unwrap()
            + swim_loss(&row(&logits[1], 0.1), &labels[1]).unwrap())
            / 2.0;
        assert!((got - expect).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn label_invariants(
            d in proptest::collection::vec(-1.0f64..1.0, 1..20),
            extra in 0usize..30,
            tau_p in 0.01f64..2.0,
        ) {
            let m = d.len();
            let n = m + extra;
            let b = soft_distribution(&d, tau_p).unwrap();
            proptest::prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..m { for j in 0..m {
                if d[i] > d[j] { proptest::prop_assert!(b[i] >= b[j]); }
            }}
            let a = adaptive_soft_labels(&b, n.max(2)).unwrap();
            let lo = if n >= 2 { 1.0 - (m as f64).ln() / (n.max(2) as f64).ln() } else { 0.0 };
            proptest::prop_assert!(a.scale >= lo - 1e-12 && a.scale <= 1.0);
            for (s, bi) in a.labels.iter().zip(&b) {
                proptest::prop_assert!(*s >= 0.0 && *s <= 1.0 && *s <= *bi + 1e-15);
            }
            let sel = FnsSelection { indices: (1..=m).collect(), similarities: d.clone() };
            let lv = build_label_vector(&sel, &a.labels, n).unwrap();
            proptest::prop_assert!((lv.target().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let max = lv.target().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert_eq!(lv.target()[0], max);
        }
    }
}
