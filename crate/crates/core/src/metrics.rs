//! Evaluation metrics, the result matrix, backward transfer, and seed
//! aggregation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a task is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Dice,
    Mae,
}

impl MetricKind {
    pub fn higher_is_better(&self) -> bool {
        matches!(self, MetricKind::Dice)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Dice => "dice",
            MetricKind::Mae => "mae",
        }
    }

    /// Forgetting sign convention for BWT under this metric: for Dice
    /// (higher is better) negative BWT means forgetting; for MAE positive
    /// BWT means forgetting.
    pub fn forgetting_convention(&self) -> &'static str {
        if self.higher_is_better() {
            "negative = forgetting"
        } else {
            "positive = forgetting"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: f64,
}

/// Dice overlap of two binary masks: (2|P∩G| + smooth) / (|P| + |G| + smooth).
///
/// Empty-vs-empty is 1.0 by convention (with the tiny evaluation smooth):
/// synthetic patches can lack foreground, and a prediction of "nothing"
/// against "nothing" is a perfect match.
pub fn dice(pred: &Tensor, gt: &Tensor, smooth: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            context: "dice",
            axis: 0,
            expected: gt.numel(),
            got: pred.numel(),
        });
    }
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if p != 0.0 && p != 1.0 {
            return Err(Error::NonBinaryTarget(p, i));
        }
        if g != 0.0 && g != 1.0 {
            return Err(Error::NonBinaryTarget(g, i));
        }
        inter += p * g;
        psum += p;
        gsum += g;
    }
    Ok((2.0 * inter + smooth) / (psum + gsum + smooth))
}

/// Default evaluation smooth, distinct from the loss's smooth of 1.0.
pub const EVAL_DICE_SMOOTH: f64 = 1e-8;

/// Mean absolute error.
pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyData("mae inputs"));
    }
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            context: "mae",
            axis: 0,
            expected: targets.len(),
            got: preds.len(),
        });
    }
    let n = preds.len() as f64;
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// R[i][j]: metric of task j evaluated after training through task i.
/// Indices are 1-based task positions; only j <= i is ever populated.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ResultMatrix {
    cells: BTreeMap<String, MetricValue>,
}

impl ResultMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(i: usize, j: usize) -> String {
        format!("{i},{j}")
    }

    pub fn set(&mut self, i: usize, j: usize, value: MetricValue) {
        debug_assert!(j <= i, "task j is only evaluated once trained (j <= i)");
        self.cells.insert(Self::key(i, j), value);
    }

    pub fn get(&self, i: usize, j: usize) -> Result<MetricValue> {
        self.cells
            .get(&Self::key(i, j))
            .copied()
            .ok_or(Error::MissingCell { i, j })
    }

    /// Backward transfer of task k after training through task t:
    /// R[t][k] - R[k][k]. The sign convention follows the task's metric
    /// (see [`MetricKind::forgetting_convention`]).
    pub fn bwt(&self, k: usize, t: usize) -> Result<f64> {
        let after = self.get(t, k)?;
        let at = self.get(k, k)?;
        Ok(after.value - at.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, MetricValue)> + '_ {
        self.cells.iter().map(|(k, v)| {
            let (i, j) = k.split_once(',').expect("key format");
            (i.parse().expect("key format"), j.parse().expect("key format"), *v)
        })
    }
}

/// Per-seed values with their mean and sample standard deviation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SeedAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and n-1 standard deviation over per-seed values.
pub fn aggregate_seeds(values: &[f64]) -> Result<SeedAggregate> {
    if values.is_empty() {
        return Err(Error::EmptyData("seed values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(SeedAggregate { values: values.to_vec(), mean, std })
}

impl SeedAggregate {
    /// Render as "mean ± std" with the table rounding rules: two decimals
    /// for Dice/BWT, three for MAE.
    pub fn render(&self, kind: MetricKind) -> String {
        match kind {
            MetricKind::Dice => format!("{:.2} ± {:.2}", self.mean, self.std),
            MetricKind::Mae => format!("{:.3} ± {:.3}", self.mean, self.std),
        }
    }
}

/// BWT rendering uses the Dice-style two-decimal rule.
pub fn render_bwt(agg: &SeedAggregate) -> String {
    format!("{:.2} ± {:.2}", agg.mean, agg.std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(data: Vec<f64>) -> Tensor {
        Tensor::new(vec![1, 2, 2, 2], data).unwrap()
    }

    #[test]
    fn dice_identical_nonempty_masks() {
        let m = mask(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let d = dice(&m, &m, EVAL_DICE_SMOOTH).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dice_disjoint_hand_value() {
        // |P| = |G| = 8 disjoint, smooth 1 -> 1/17
        let p = Tensor::new(vec![16], [vec![1.0; 8], vec![0.0; 8]].concat()).unwrap();
        let g = Tensor::new(vec![16], [vec![0.0; 8], vec![1.0; 8]].concat()).unwrap();
        let d = dice(&p, &g, 1.0).unwrap();
        assert!((d - 1.0 / 17.0).abs() < 1e-15);
        assert!((d - 0.058823529411764705).abs() < 1e-15);
    }

    #[test]
    fn dice_empty_vs_empty_is_one() {
        let z = mask(vec![0.0; 8]);
        let d = dice(&z, &z, EVAL_DICE_SMOOTH).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn dice_rejects_non_binary() {
        let p = mask(vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let g = mask(vec![0.0; 8]);
        assert!(matches!(dice(&p, &g, 1.0), Err(Error::NonBinaryTarget(_, 0))));
    }

    #[test]
    fn dice_is_symmetric_and_bounded() {
        let mut rng = crate::rng::Rng::new(17);
        for _ in 0..50 {
            let p = mask((0..8).map(|_| if rng.next_f64() < 0.4 { 1.0 } else { 0.0 }).collect());
            let g = mask((0..8).map(|_| if rng.next_f64() < 0.4 { 1.0 } else { 0.0 }).collect());
            let a = dice(&p, &g, 1.0).unwrap();
            let b = dice(&g, &p, 1.0).unwrap();
            assert_eq!(a, b);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn mae_trivials_and_reordered_sum() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(mae(&[], &[]), Err(Error::EmptyData(_))));

        let mut rng = crate::rng::Rng::new(23);
        let p: Vec<f64> = (0..64).map(|_| rng.gaussian()).collect();
        let t: Vec<f64> = (0..64).map(|_| rng.gaussian()).collect();
        let forward = mae(&p, &t).unwrap();
        // independent second route: reversed iteration order
        let rev: f64 = p
            .iter()
            .zip(&t)
            .rev()
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 64.0;
        assert!((forward - rev).abs() < 1e-12);
    }

    #[test]
    fn bwt_paper_fixtures() {
        let mut m = ResultMatrix::new();
        m.set(1, 1, MetricValue { kind: MetricKind::Dice, value: 0.80 });
        m.set(2, 1, MetricValue { kind: MetricKind::Dice, value: 0.16 });
        let b = m.bwt(1, 2).unwrap();
        assert!((b - (-0.64)).abs() < 1e-12);

        let mut m = ResultMatrix::new();
        m.set(1, 1, MetricValue { kind: MetricKind::Mae, value: 0.001 });
        m.set(2, 1, MetricValue { kind: MetricKind::Mae, value: 7.17 });
        let b = m.bwt(1, 2).unwrap();
        assert!((b - 7.169).abs() < 1e-12);
    }

    #[test]
    fn bwt_zero_when_cells_equal() {
        let mut m = ResultMatrix::new();
        let v = MetricValue { kind: MetricKind::Dice, value: 0.62345 };
        m.set(1, 1, v);
        m.set(2, 1, v);
        assert_eq!(m.bwt(1, 2).unwrap(), 0.0);
        assert!(matches!(m.bwt(2, 2), Err(Error::MissingCell { i: 2, j: 2 })));
    }

    #[test]
    fn aggregate_matches_paper_per_seed_table() {
        let agg = aggregate_seeds(&[0.523, 0.598, 0.680]).unwrap();
        assert!((agg.mean - 0.6003333333333334).abs() < 1e-15);
        assert!((agg.std - 0.07852600418545017).abs() < 1e-12);
        assert_eq!(agg.render(MetricKind::Dice), "0.60 ± 0.08");
    }

    #[test]
    fn aggregate_single_value_and_permutation_invariance() {
        let one = aggregate_seeds(&[0.4]).unwrap();
        assert_eq!(one.std, 0.0);
        let a = aggregate_seeds(&[0.1, 0.5, 0.3]).unwrap();
        let b = aggregate_seeds(&[0.5, 0.3, 0.1]).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-15);
        assert!((a.std - b.std).abs() < 1e-15);
    }

    #[test]
    fn mae_render_uses_three_decimals() {
        let agg = aggregate_seeds(&[0.014, 0.008, 0.012]).unwrap();
        assert_eq!(agg.render(MetricKind::Mae), "0.011 ± 0.003");
    }
}
