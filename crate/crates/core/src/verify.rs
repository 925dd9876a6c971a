//! Cosine trial scoring and equal error rate.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default per-class trial cap before sampling kicks in.
pub const DEFAULT_MAX_TRIALS: usize = 1_000_000;
const SCORE_CHUNK: usize = 256;

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    let c = dot / (nu.sqrt() * nv.sqrt());
    if !c.is_finite() {
        return Err(Error::invalid("non-finite cosine"));
    }
    Ok(c.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub enroll_id: String,
    pub test_id: String,
    pub same_speaker: bool,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// EER over labelled trials.
pub fn eer(trials: &[TrialScore]) -> Result<EerResult> {
    let (tar, non): (Vec<&TrialScore>, Vec<&TrialScore>) = trials.iter().partition(|t| t.same_speaker);
    let tar: Vec<f64> = tar.iter().map(|t| t.score).collect();
    let non: Vec<f64> = non.iter().map(|t| t.score).collect();
    eer_from_scores(&tar, &non)
}

/// EER from raw target and non-target scores.
///
/// Thresholds sweep the sorted unique scores plus `+inf`. With
/// `FAR(θ) = P(non ≥ θ)` and `FRR(θ) = P(tar < θ)`, the rate is read off
/// by linear interpolation where `FAR - FRR` first reaches zero.
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<EerResult> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::invalid(format!(
            "need target and non-target trials, got {} and {}",
            targets.len(),
            nontargets.len()
        )));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite trial score"));
    }
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);
    let mut all: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (threshold, FAR, FRR) at every unique score, then +inf
    let mut points = Vec::with_capacity(all.len() + 1);
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let theta = all[i].0;
        points.push((theta, (nn - non_below as f64) / nn, tar_below as f64 / nt));
        while i < all.len() && all[i].0 == theta {
            if all[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push((f64::INFINITY, 0.0, 1.0));

    let k = points
        .iter()
        .position(|&(_, far, frr)| far - frr <= 0.0)
        .expect("FAR - FRR is -1 at +inf");
    let (theta_k, far_k, frr_k) = points[k];
    let result = |eer: f64, threshold: f64| EerResult {
        eer,
        threshold,
        n_target: targets.len(),
        n_nontarget: nontargets.len(),
    };
    if far_k == frr_k {
        return Ok(result(far_k, theta_k));
    }
    // k > 0 because FAR - FRR = 1 at the lowest score
    let (theta_p, far_p, frr_p) = points[k - 1];
    let (fp, fk) = (far_p - frr_p, far_k - frr_k);
    let lambda = fp / (fp - fk);
    let threshold = if theta_k.is_finite() {
        (1.0 - lambda) * theta_p + lambda * theta_k
    } else {
        theta_p
    };
    Ok(result((1.0 - lambda) * far_p + lambda * far_k, threshold))
}

/// An unmanipulated utterance embedding with its speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedUtterance {
    pub id: String,
    pub speaker: String,
    pub embedding: Vec<f64>,
}

/// How many trials of each class to score. Beyond `max_per_class` a seeded
/// uniform sample without replacement is taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairingPolicy {
    pub max_per_class: usize,
    pub seed: u64,
}

impl Default for PairingPolicy {
    fn default() -> Self {
        Self {
            max_per_class: DEFAULT_MAX_TRIALS,
            seed: 0,
        }
    }
}

/// Originals grouped by speaker into contiguous blocks.
struct SpeakerIndex<'a> {
    utts: Vec<&'a EmbeddedUtterance>,
    block: HashMap<&'a str, (usize, usize)>,
    position: HashMap<&'a str, usize>,
}

impl<'a> SpeakerIndex<'a> {
    fn new(originals: &'a [EmbeddedUtterance]) -> Result<Self> {
        let mut utts: Vec<&EmbeddedUtterance> = originals.iter().collect();
        utts.sort_by(|a, b| a.speaker.cmp(&b.speaker).then(a.id.cmp(&b.id)));
        let mut position = HashMap::new();
        let mut block: HashMap<&str, (usize, usize)> = HashMap::new();
        for (i, u) in utts.iter().enumerate() {
            if position.insert(u.id.as_str(), i).is_some() {
                return Err(Error::invalid(format!("duplicate utterance id '{}'", u.id)));
            }
            block.entry(u.speaker.as_str()).and_modify(|b| b.1 = i + 1).or_insert((i, i + 1));
        }
        Ok(Self { utts, block, position })
    }
}

/// A manipulated utterance, its speaker block and its own original slot.
struct Probe<'a> {
    id: &'a str,
    embedding: &'a [f64],
    block: (usize, usize),
    own: usize,
}

impl Probe<'_> {
    fn n_target(&self) -> usize {
        self.block.1 - self.block.0 - 1
    }

    fn target(&self, k: usize) -> usize {
        let j = self.block.0 + k;
        if j >= self.own {
            j + 1
        } else {
            j
        }
    }

    fn n_nontarget(&self, total: usize) -> usize {
        total - (self.block.1 - self.block.0)
    }

    fn nontarget(&self, k: usize) -> usize {
        if k < self.block.0 {
            k
        } else {
            k + self.block.1 - self.block.0
        }
    }
}

/// Picks `(probe, candidate)` pairs for one class: all of them, or a seeded
/// sample when there are more than `cap`.
fn select(counts: &[usize], cap: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut prefix = Vec::with_capacity(counts.len() + 1);
    prefix.push(0usize);
    for c in counts {
        prefix.push(prefix.last().copied().unwrap_or(0) + c);
    }
    let total = *prefix.last().unwrap_or(&0);
    let locate = |flat: usize| {
        let p = prefix.partition_point(|&s| s <= flat) - 1;
        (p, flat - prefix[p])
    };
    if total <= cap {
        (0..total).map(locate).collect()
    } else {
        let mut picked = sample(rng, total, cap).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(locate).collect()
    }
}

/// Scores manipulated embeddings against unmanipulated ones.
///
/// Target trials pair a manipulated utterance with every other original
/// utterance of its speaker; non-target trials pair it with originals of
/// other speakers. Each manipulated id must name an original utterance.
pub fn build_trials(
    originals: &[EmbeddedUtterance],
    manipulated: &BTreeMap<String, Vec<f64>>,
    policy: &PairingPolicy,
) -> Result<Vec<TrialScore>> {
    if manipulated.is_empty() {
        return Err(Error::invalid("no manipulated embeddings"));
    }
    let index = SpeakerIndex::new(originals)?;
    let mut probes = Vec::with_capacity(manipulated.len());
    for (id, emb) in manipulated {
        let pos = *index
            .position
            .get(id.as_str())
            .ok_or_else(|| Error::invalid(format!("manipulated id '{id}' has no original")))?;
        let speaker = index.utts[pos].speaker.as_str();
        probes.push(Probe {
            id,
            embedding: emb,
            block: index.block[speaker],
            own: pos,
        });
    }
    let mut lonely: Vec<&str> = index
        .block
        .iter()
        .filter(|(_, b)| b.1 - b.0 < 2)
        .map(|(s, _)| *s)
        .collect();
    if !lonely.is_empty() {
        lonely.sort_unstable();
        warn!("{} speaker(s) with a single utterance give no target trials: {}", lonely.len(), lonely.join(", "));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let n_orig = index.utts.len();
    let tar_counts: Vec<usize> = probes.iter().map(Probe::n_target).collect();
    let non_counts: Vec<usize> = probes.iter().map(|p| p.n_nontarget(n_orig)).collect();
    let mut pairs: Vec<(usize, usize, bool)> = select(&tar_counts, policy.max_per_class, &mut rng)
        .into_iter()
        .map(|(p, k)| (p, probes[p].target(k), true))
        .collect();
    pairs.extend(
        select(&non_counts, policy.max_per_class, &mut rng)
            .into_iter()
            .map(|(p, k)| (p, probes[p].nontarget(k), false)),
    );

    let scored: Vec<Result<Vec<TrialScore>>> = pairs
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&(p, o, same)| {
                    let orig = index.utts[o];
                    Ok(TrialScore {
                        enroll_id: orig.id.clone(),
                        test_id: probes[p].id.to_string(),
                        same_speaker: same,
                        score: cosine(&orig.embedding, probes[p].embedding)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in scored {
        out.extend(chunk?);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

pub fn write_trials_csv<W: Write>(out: W, trials: &[TrialScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in trials {
        w.serialize(t).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials_csv<R: std::io::Read>(input: R) -> Result<Vec<TrialScore>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// One `(beta, EER)` point per row.
pub fn write_eer_curve_csv<W: Write>(out: W, curve: &[(f64, EerResult)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["beta", "eer", "threshold", "n_target", "n_nontarget"]).map_err(csv_err)?;
    for (beta, r) in curve {
        w.write_record([
            beta.to_string(),
            format!("{:.6}", r.eer),
            format!("{:.6}", r.threshold),
            r.n_target.to_string(),
            r.n_nontarget.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn trials(tar: &[f64], non: &[f64]) -> Vec<TrialScore> {
        tar.iter()
            .map(|&s| (s, true))
            .chain(non.iter().map(|&s| (s, false)))
            .enumerate()
            .map(|(i, (score, same))| TrialScore {
                enroll_id: format!("e{i}"),
                test_id: format!("t{i}"),
                same_speaker: same,
                score,
            })
            .collect()
    }

    /// Counts errors at every candidate threshold directly, without sorting.
    fn brute_force(tar: &[f64], non: &[f64]) -> f64 {
        let mut thetas: Vec<f64> = tar.iter().chain(non).copied().collect();
        thetas.sort_by(f64::total_cmp);
        thetas.dedup();
        thetas.push(f64::INFINITY);
        let rates = |th: f64| {
            let far = non.iter().filter(|&&s| s >= th).count() as f64 / non.len() as f64;
            let frr = tar.iter().filter(|&&s| s < th).count() as f64 / tar.len() as f64;
            (far, frr)
        };
        let mut prev = rates(thetas[0]);
        for &th in &thetas {
            let (far, frr) = rates(th);
            if far <= frr {
                if far == frr {
                    return far;
                }
                // crossing of the two piecewise-linear rate curves
                let (d0, d1) = (prev.0 - prev.1, far - frr);
                let l = d0 / (d0 - d1);
                return prev.0 + l * (far - prev.0);
            }
            prev = (far, frr);
        }
        unreachable!()
    }

    #[test]
    fn cosine_basics() {
        let v = [1.0, 2.0, -3.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        assert!((cosine(&v, &[-1.0, -2.0, 3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn separable_scores() {
        let r = eer(&trials(&[0.9; 5], &[0.1; 7])).unwrap();
        assert_eq!(r.eer, 0.0);
        assert_eq!((r.n_target, r.n_nontarget), (5, 7));
        assert!((0.1..=0.9).contains(&r.threshold));
    }

    #[test]
    fn reversed_scores_give_full_error() {
        let r = eer_from_scores(&[0.1; 3], &[0.9; 3]).unwrap();
        assert!((r.eer - 1.0).abs() < 1e-12, "{}", r.eer);
    }

    #[test]
    fn identical_distributions_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = Normal::new(0.0, 1.0).unwrap();
        let tar: Vec<f64> = (0..10_000).map(|_| n.sample(&mut rng)).collect();
        let non: Vec<f64> = (0..10_000).map(|_| n.sample(&mut rng)).collect();
        let r = eer_from_scores(&tar, &non).unwrap();
        assert!((0.48..=0.52).contains(&r.eer), "{}", r.eer);
    }

    #[test]
    fn empty_class_rejected() {
        assert!(eer(&trials(&[0.5], &[])).is_err());
        assert!(eer(&trials(&[], &[0.5])).is_err());
        assert!(eer_from_scores(&[f64::NAN], &[0.0]).is_err());
    }

    fn corpus(speakers: usize, utts: usize, seed: u64) -> Vec<EmbeddedUtterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for s in 0..speakers {
            let centre: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            for u in 0..utts {
                out.push(EmbeddedUtterance {
                    id: format!("s{s}_u{u}"),
                    speaker: format!("s{s}"),
                    embedding: centre.iter().map(|c| c + rng.random_range(-0.3..0.3)).collect(),
                });
            }
        }
        out
    }

    fn as_map(utts: &[EmbeddedUtterance]) -> BTreeMap<String, Vec<f64>> {
        utts.iter().map(|u| (u.id.clone(), u.embedding.clone())).collect()
    }

    #[test]
    fn exhaustive_trial_counts() {
        let c = corpus(2, 2, 1);
        let t = build_trials(&c, &as_map(&c), &PairingPolicy::default()).unwrap();
        assert_eq!(t.iter().filter(|t| t.same_speaker).count(), 4);
        assert_eq!(t.iter().filter(|t| !t.same_speaker).count(), 8);
        assert!(t.iter().all(|t| t.enroll_id != t.test_id));
        for tr in &t {
            let sp = |id: &str| id.split('_').next().unwrap().to_string();
            assert_eq!(sp(&tr.enroll_id) == sp(&tr.test_id), tr.same_speaker);
        }
    }

    #[test]
    fn capped_sampling_is_deterministic() {
        let c = corpus(6, 5, 2);
        let policy = PairingPolicy { max_per_class: 20, seed: 9 };
        let a = build_trials(&c, &as_map(&c), &policy).unwrap();
        let b = build_trials(&c, &as_map(&c), &policy).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        let mut keys: Vec<(String, String)> = a.iter().map(|t| (t.enroll_id.clone(), t.test_id.clone())).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 40);
        let other = build_trials(&c, &as_map(&c), &PairingPolicy { seed: 10, ..policy }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn unmanipulated_probes_match_intrinsic_eer() {
        let c = corpus(8, 4, 3);
        let (mut tar, mut non) = (Vec::new(), Vec::new());
        for (i, a) in c.iter().enumerate() {
            for b in &c[i + 1..] {
                let s = cosine(&a.embedding, &b.embedding).unwrap();
                if a.speaker == b.speaker { tar.push(s) } else { non.push(s) }
            }
        }
        let intrinsic = eer_from_scores(&tar, &non).unwrap();
        let identity = eer(&build_trials(&c, &as_map(&c), &PairingPolicy::default()).unwrap()).unwrap();
        assert!(identity.eer <= intrinsic.eer + 1e-12, "{} vs {}", identity.eer, intrinsic.eer);
        assert_eq!(identity.n_target, 2 * tar.len());
    }

    #[test]
    fn bad_inputs() {
        let c = corpus(2, 2, 4);
        assert!(build_trials(&c, &BTreeMap::new(), &PairingPolicy::default()).is_err());
        let mut m = BTreeMap::new();
        m.insert("ghost".to_string(), vec![1.0; 4]);
        assert!(build_trials(&c, &m, &PairingPolicy::default()).is_err());
        let single = corpus(3, 1, 5);
        let t = build_trials(&single, &as_map(&single), &PairingPolicy::default()).unwrap();
        assert_eq!(t.iter().filter(|t| t.same_speaker).count(), 0);
    }

    #[test]
    fn csv_round_trip() {
        let t = trials(&[0.5, 0.25], &[-0.125]);
        let mut buf = Vec::new();
        write_trials_csv(&mut buf, &t).unwrap();
        assert_eq!(read_trials_csv(buf.as_slice()).unwrap(), t);
        let mut buf = Vec::new();
        write_eer_curve_csv(&mut buf, &[(0.25, eer(&t).unwrap())]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("beta,eer,threshold"));
    }

    fn score_lists() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        // coarse grid so ties are common
        let s = (-20i32..20).prop_map(|v| v as f64 / 10.0);
        (prop::collection::vec(s.clone(), 1..40), prop::collection::vec(s, 1..40))
    }

    proptest! {
        #[test]
        fn matches_brute_force((tar, non) in score_lists()) {
            let r = eer_from_scores(&tar, &non).unwrap();
            prop_assert!((r.eer - brute_force(&tar, &non)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&r.eer));
        }

        #[test]
        fn invariant_under_increasing_transform((tar, non) in score_lists()) {
            let f = |v: &Vec<f64>| v.iter().map(|x| (2.0 * x).exp() + 3.0).collect::<Vec<_>>();
            let a = eer_from_scores(&tar, &non).unwrap().eer;
            let b = eer_from_scores(&f(&tar), &f(&non)).unwrap().eer;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_label_flip_and_negation(
            tar in prop::collection::vec(-1000i32..1000, 1..30),
            non in prop::collection::vec(-1000i32..1000, 1..30),
        ) {
            // distinct scores: the >= / < convention makes ties asymmetric
            let mut seen = std::collections::HashSet::new();
            let tar: Vec<f64> = tar.into_iter().filter(|v| seen.insert(*v)).map(f64::from).collect();
            let non: Vec<f64> = non.into_iter().filter(|v| seen.insert(*v)).map(f64::from).collect();
            prop_assume!(!tar.is_empty() && !non.is_empty());
            let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
            let a = eer_from_scores(&tar, &non).unwrap().eer;
            let b = eer_from_scores(&neg(&non), &neg(&tar)).unwrap().eer;
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }
}
