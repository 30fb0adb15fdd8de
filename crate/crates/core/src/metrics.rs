//! Confusion counts and the macro-averaged sensitivity, specificity, AUC
//! and average precision over the three classes.

use serde::{Deserialize, Serialize};

use crate::data::{VertebraClass, NUM_CLASSES};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionState {
    /// `counts[true][predicted]`
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub scores: Vec<[f64; NUM_CLASSES]>,
    pub truths: Vec<VertebraClass>,
}

impl ConfusionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, truth: VertebraClass, predicted: VertebraClass, scores: [f64; NUM_CLASSES]) -> Result<()> {
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite score {s}")));
        }
        self.counts[truth.index()][predicted.index()] += 1;
        self.scores.push(scores);
        self.truths.push(truth);
        Ok(())
    }

    /// Accumulates with the prediction taken as the highest score
    /// (lowest class on ties).
    pub fn accumulate_scores(&mut self, truth: VertebraClass, scores: [f64; NUM_CLASSES]) -> Result<()> {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if scores[k] > scores[best] {
                best = k;
            }
        }
        self.accumulate(truth, VertebraClass::ALL[best], scores)
    }

    /// Associative merge of two shards.
    pub fn merge(mut self, other: &ConfusionState) -> ConfusionState {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
        self.scores.extend_from_slice(&other.scores);
        self.truths.extend_from_slice(&other.truths);
        self
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum::<u64>() as f64 / total as f64)
    }

    /// One-vs-rest `(TP, FN, TN, FP)` for class `k`.
    pub fn one_vs_rest(&self, k: usize) -> (u64, u64, u64, u64) {
        let mut t = (0, 0, 0, 0);
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                match (i == k, j == k) {
                    (true, true) => t.0 += c,
                    (true, false) => t.1 += c,
                    (false, false) => t.2 += c,
                    (false, true) => t.3 += c,
                }
            }
        }
        t
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `(SE_k, SP_k)` per class; `None` marks an undefined component.
pub fn per_class_se_sp(state: &ConfusionState) -> Vec<(Option<f64>, Option<f64>)> {
    (0..NUM_CLASSES)
        .map(|k| {
            let (tp, fn_, tn, fp) = state.one_vs_rest(k);
            (ratio(tp, tp + fn_), ratio(tn, tn + fp))
        })
        .collect()
}

/// One-vs-rest AUC as the Mann-Whitney statistic; ties count one half.
pub fn auc_one_vs_rest(state: &ConfusionState, k: usize) -> Option<f64> {
    let mut items: Vec<(f64, bool)> = state
        .scores
        .iter()
        .zip(&state.truths)
        .map(|(s, t)| (s[k], t.index() == k))
        .collect();
    let n_pos = items.iter().filter(|x| x.1).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j < items.len() && items[j].0 == items[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * items[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision: `Σ (R_t - R_{t-1}) P_t` over distinct
/// score thresholds in decreasing order.
pub fn average_precision(state: &ConfusionState, k: usize) -> Option<f64> {
    let mut items: Vec<(f64, bool)> = state
        .scores
        .iter()
        .zip(&state.truths)
        .map(|(s, t)| (s[k], t.index() == k))
        .collect();
    let n_pos = items.iter().filter(|x| x.1).count();
    if n_pos == 0 {
        return None;
    }
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut ap, mut prev_recall) = (0usize, 0.0, 0.0);
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j < items.len() && items[j].0 == items[i].0 {
            tp += usize::from(items[j].1);
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / j as f64;
        prev_recall = recall;
        i = j;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: VertebraClass,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    pub average_precision: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub ase: f64,
    pub asp: f64,
    pub aauc: f64,
    pub map: f64,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>, undefined: &mut usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => *undefined += 1,
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Metrics report with the confusion matrix and undefined-component flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
    /// Names such as `"sensitivity[2]"` for components left out of the means.
    pub undefined: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn per_class_metrics(state: &ConfusionState) -> Vec<ClassMetrics> {
    per_class_se_sp(state)
        .into_iter()
        .enumerate()
        .map(|(k, (se, sp))| ClassMetrics {
            class: VertebraClass::ALL[k],
            sensitivity: se,
            specificity: sp,
            auc: auc_one_vs_rest(state, k),
            average_precision: average_precision(state, k),
        })
        .collect()
}

/// Unweighted means over the classes whose component is defined.
pub fn macro_metrics(state: &ConfusionState) -> MacroMetrics {
    report(state).macro_avg
}

pub fn report(state: &ConfusionState) -> MetricsReport {
    let per_class = per_class_metrics(state);
    let mut undefined = Vec::new();
    let mut component = |name: &str, get: fn(&ClassMetrics) -> Option<f64>| {
        let mut missing = 0;
        let mean = mean_defined(per_class.iter().map(get), &mut missing);
        for c in per_class.iter().filter(|c| get(c).is_none()) {
            undefined.push(format!("{name}[{}]", c.class.id()));
        }
        if missing > 0 {
            log::warn!("{name}: {missing} undefined class component(s) excluded from the mean");
        }
        mean
    };
    let macro_avg = MacroMetrics {
        ase: component("sensitivity", |c| c.sensitivity),
        asp: component("specificity", |c| c.specificity),
        aauc: component("auc", |c| c.auc),
        map: component("average_precision", |c| c.average_precision),
    };
    MetricsReport {
        samples: state.total(),
        accuracy: state.accuracy(),
        per_class,
        macro_avg,
        confusion: state.counts,
        undefined,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use VertebraClass::*;

    fn from_counts(counts: [[u64; 3]; 3]) -> ConfusionState {
        let mut s = ConfusionState::new();
        for (i, row) in counts.iter().enumerate() {
            for (j, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    let mut sc = [0.0; 3];
                    sc[j] = 1.0;
                    s.accumulate(VertebraClass::ALL[i], VertebraClass::ALL[j], sc).unwrap();
                }
            }
        }
        s
    }

    #[test]
    fn accumulate_basics() {
        let mut s = ConfusionState::new();
        s.accumulate(Normal, Normal, [0.9, 0.05, 0.05]).unwrap();
        assert_eq!(s.counts[0][0], 1);
        for i in 0..9 {
            s.accumulate(VertebraClass::ALL[i % 3], Benign, [0.1, 0.2, 0.7]).unwrap();
        }
        assert_eq!(s.total(), 10);
        assert!(s.accumulate(Normal, Normal, [f64::NAN, 0.0, 0.0]).is_err());
        assert_eq!(s.total(), 10);
    }

    #[test]
    fn perfect_and_mixed_se_sp() {
        let perfect = per_class_se_sp(&from_counts([[5, 0, 0], [0, 3, 0], [0, 0, 2]]));
        assert!(perfect.iter().all(|&(se, sp)| se == Some(1.0) && sp == Some(1.0)));
        let mixed = per_class_se_sp(&from_counts([[8, 1, 1], [2, 6, 2], [1, 1, 8]]));
        assert!((mixed[0].0.unwrap() - 0.8).abs() < 1e-12);
        assert!((mixed[0].1.unwrap() - 0.85).abs() < 1e-12);
        let absent = per_class_se_sp(&from_counts([[3, 1, 0], [1, 2, 0], [0, 0, 0]]));
        assert_eq!(absent[2].0, None);
        let r = report(&from_counts([[3, 1, 0], [1, 2, 0], [0, 0, 0]]));
        assert!(r.undefined.contains(&"sensitivity[2]".to_string()));
        assert!((r.macro_avg.ase - (0.75 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking() {
        let mut s = ConfusionState::new();
        for i in 0..30 {
            let y = VertebraClass::ALL[i % 3];
            let mut sc = [0.1; 3];
            sc[y.index()] = 0.8;
            s.accumulate_scores(y, sc).unwrap();
        }
        let m = macro_metrics(&s);
        assert_eq!((m.aauc, m.map, m.ase, m.asp), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn random_scores_give_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ConfusionState::new();
        for i in 0..3000 {
            let sc = [rng.random(), rng.random(), rng.random()];
            s.accumulate_scores(VertebraClass::ALL[i % 3], sc).unwrap();
        }
        let m = macro_metrics(&s);
        assert!((m.aauc - 0.5).abs() < 0.05, "{}", m.aauc);
    }

    #[test]
    fn merge_matches_sequential_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut all = ConfusionState::new();
        let mut a = ConfusionState::new();
        let mut b = ConfusionState::new();
        for i in 0..40 {
            let y = VertebraClass::ALL[rng.random_range(0..3)];
            let sc = [rng.random(), rng.random(), rng.random()];
            all.accumulate_scores(y, sc).unwrap();
            if i < 17 { &mut a } else { &mut b }.accumulate_scores(y, sc).unwrap();
        }
        assert_eq!(a.merge(&b), all);
    }

    #[test]
    fn strictly_increasing_transform_keeps_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ConfusionState::new();
        let mut t = ConfusionState::new();
        for _ in 0..60 {
            let y = VertebraClass::ALL[rng.random_range(0..3)];
            let sc: [f64; 3] = [(rng.random_range(0..5) as f64) / 4.0, rng.random(), rng.random()];
            s.accumulate_scores(y, sc).unwrap();
            t.accumulate(y, y, sc.map(|v| (3.0 * v).exp() - 2.0)).unwrap();
        }
        for k in 0..3 {
            assert!((auc_one_vs_rest(&s, k).unwrap() - auc_one_vs_rest(&t, k).unwrap()).abs() < 1e-12);
        }
    }
}
