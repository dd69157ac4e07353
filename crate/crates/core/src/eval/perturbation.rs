use serde::{Deserialize, Serialize};

use super::{descending_order, group_width, par_map, pearson, target_probs, Curve, DenseClassifier};
use crate::error::{Error, Result};
use crate::models::{accuracy, train_classifier, Model, TrainConfig};
use crate::rng::RngStream;
use crate::synthdata::{Dataset, PatchDataset, PatchImageSet};
use crate::tensor::Tensor;

/// What to do when a correlation is undefined (zero variance).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Degenerate {
    Error,
    /// Report 0 and flag the point.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub curve: Curve,
    /// One flag per curve point; `true` where the correlation was undefined.
    pub degenerate: Vec<bool>,
}

const EVAL_CHUNK: usize = 128;

/// Logits of the rows of `states` in chunks, target column only.
fn target_logits<M: DenseClassifier + ?Sized>(model: &M, states: &[Tensor], target: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(states.len());
    for chunk in states.chunks(EVAL_CHUNK) {
        let logits = model.logits_dense(&Tensor::stack(chunk)?)?;
        let k = logits.shape()[1];
        if target >= k {
            return Err(Error::invalid(format!("target class {target} out of range")));
        }
        out.extend(logits.data().chunks(k).map(|r| r[target]));
    }
    Ok(out)
}

fn target_probabilities<M: DenseClassifier + ?Sized>(model: &M, states: &[Tensor], target: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(states.len());
    for chunk in states.chunks(EVAL_CHUNK) {
        let logits = model.logits_dense(&Tensor::stack(chunk)?)?;
        if target >= logits.shape()[1] {
            return Err(Error::invalid(format!("target class {target} out of range")));
        }
        out.extend(target_probs(&logits, target)?);
    }
    Ok(out)
}

fn check_pair(x: &Tensor, other: &Tensor, what: &'static str) -> Result<()> {
    if x.shape() != other.shape() {
        return Err(Error::shape(what, format!("input {:?} vs {:?}", x.shape(), other.shape())));
    }
    Ok(())
}

/// Copies the groups of `positions` from `src` into `dst`.
fn copy_groups(dst: &mut [f64], src: &[f64], positions: &[usize], width: usize) {
    for &p in positions {
        dst[p * width..(p + 1) * width].copy_from_slice(&src[p * width..(p + 1) * width]);
    }
}

/// Sensitivity-N: for each `n`, `k_sets` random position sets of size `n` are
/// replaced by `baseline`; the curve holds the correlation between the drop in
/// the target logit and the map mass of each set.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_n<M: DenseClassifier + ?Sized>(
    model: &M,
    x: &Tensor,
    target: usize,
    map: &Tensor,
    baseline: &Tensor,
    n_values: &[usize],
    k_sets: usize,
    policy: Degenerate,
    stream: &mut RngStream,
) -> Result<Sensitivity> {
    check_pair(x, baseline, "sensitivity-n baseline")?;
    let positions = map.len();
    let width = group_width(x.len(), positions)?;
    if k_sets < 2 {
        return Err(Error::invalid("sensitivity-n needs at least 2 index sets"));
    }
    if let Some(&n) = n_values.iter().find(|&&n| n > positions) {
        return Err(Error::invalid(format!("n = {n} exceeds the {positions} map positions")));
    }
    let xs: Vec<f64> = n_values.iter().map(|&n| n as f64).collect();
    let _ = Curve::new("", xs.clone(), vec![0.0; xs.len()])?;

    let base = target_logits(model, std::slice::from_ref(x), target)?[0];
    let mut ys = Vec::with_capacity(n_values.len());
    let mut degenerate = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut states = Vec::with_capacity(k_sets);
        let mut sums = Vec::with_capacity(k_sets);
        for _ in 0..k_sets {
            let set = stream.sample_indices(positions, n);
            sums.push(set.iter().map(|&p| map.data()[p]).sum::<f64>());
            let mut v = x.data().to_vec();
            copy_groups(&mut v, baseline.data(), &set, width);
            states.push(Tensor::new(x.shape().to_vec(), v)?);
        }
        let changes: Vec<f64> = target_logits(model, &states, target)?.iter().map(|l| base - l).collect();
        match (pearson(&changes, &sums), policy) {
            (Ok(r), _) => {
                ys.push(r);
                degenerate.push(false);
            }
            (Err(Error::UndefinedCorrelation(_)), Degenerate::Zero) => {
                ys.push(0.0);
                degenerate.push(true);
            }
            (Err(e), _) => return Err(e),
        }
    }
    Ok(Sensitivity {
        curve: Curve::new("sensitivity-n", xs, ys)?,
        degenerate,
    })
}

/// Sensitivity-N over fractions of the positions: `n = ⌈pct · L⌉`.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_pct<M: DenseClassifier + ?Sized>(
    model: &M,
    x: &Tensor,
    target: usize,
    map: &Tensor,
    baseline: &Tensor,
    pct_values: &[f64],
    k_sets: usize,
    policy: Degenerate,
    stream: &mut RngStream,
) -> Result<Sensitivity> {
    if pct_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("percentages must lie in [0, 1]"));
    }
    let len = map.len() as f64;
    // Guard against 0.1·30 = 3.0000000000000004 rounding up to 4.
    let ns: Vec<usize> = pct_values.iter().map(|p| (p * len - 1e-9).ceil().max(0.0) as usize).collect();
    let mut out = Sensitivity {
        curve: Curve::new("sensitivity-pct", pct_values.to_vec(), vec![0.0; pct_values.len()])?,
        degenerate: vec![],
    };
    // Distinct percentages may share an n, so evaluate point by point.
    for (i, &n) in ns.iter().enumerate() {
        let s = sensitivity_n(model, x, target, map, baseline, &[n], k_sets, policy, stream)?;
        out.curve.ys[i] = s.curve.ys[0];
        out.degenerate.push(s.degenerate[0]);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsDel {
    pub insertion: Curve,
    pub deletion: Curve,
    pub ins_auc: f64,
    pub del_auc: f64,
}

/// States `0..=S` moving from `from` towards `to`, `batch` positions per step in
/// `order`; the last state equals `to` on every group.
pub(crate) fn step_states(from: &Tensor, to: &Tensor, order: &[usize], width: usize, batch: usize) -> Result<Vec<Tensor>> {
    let mut cur = from.data().to_vec();
    let mut out = vec![from.clone()];
    for chunk in order.chunks(batch) {
        copy_groups(&mut cur, to.data(), chunk, width);
        out.push(Tensor::new(from.shape().to_vec(), cur.clone())?);
    }
    Ok(out)
}

/// Insertion and deletion curves of the target-class probability.
///
/// Deletion replaces the highest-scored positions of `x` with `deletion_end`,
/// `batch` per step; insertion starts at `insertion_start` and restores them
/// from `x` in the same order. Both x-axes are the perturbed fraction.
pub fn insertion_deletion<M: DenseClassifier + ?Sized>(
    model: &M,
    x: &Tensor,
    target: usize,
    map: &Tensor,
    batch: usize,
    insertion_start: &Tensor,
    deletion_end: &Tensor,
) -> Result<InsDel> {
    if batch == 0 {
        return Err(Error::invalid("insertion/deletion batch must be at least 1"));
    }
    check_pair(x, insertion_start, "insertion start")?;
    check_pair(x, deletion_end, "deletion end")?;
    let positions = map.len();
    let width = group_width(x.len(), positions)?;
    let order = descending_order(map.data());

    let del_states = step_states(x, deletion_end, &order, width, batch)?;
    let ins_states = step_states(insertion_start, x, &order, width, batch)?;
    let xs: Vec<f64> = (0..del_states.len())
        .map(|k| (k * batch).min(positions) as f64 / positions as f64)
        .collect();
    let mut all = del_states;
    let steps = all.len();
    all.extend(ins_states);
    let probs = target_probabilities(model, &all, target)?;
    let deletion = Curve::new("deletion", xs.clone(), probs[..steps].to_vec())?;
    let insertion = Curve::new("insertion", xs, probs[steps..].to_vec())?;
    Ok(InsDel {
        ins_auc: super::auc_trapezoid(&insertion)?,
        del_auc: super::auc_trapezoid(&deletion)?,
        insertion,
        deletion,
    })
}

/// One retraining run of the remove-and-retrain benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoarPoint {
    pub rate: f64,
    pub accuracy: Option<f64>,
    /// Why the run produced no accuracy (for example divergence).
    pub error: Option<String>,
}

/// Replaces the `round(rate · P)` highest-scored pixels of every image with `fill`.
pub(crate) fn roar_perturb(set: &PatchImageSet, maps: &[Tensor], rate: f64, fill: f64) -> Result<PatchImageSet> {
    if maps.len() != set.len() {
        return Err(Error::invalid(format!("{} maps for {} images", maps.len(), set.len())));
    }
    let per = set.images.len() / set.len().max(1);
    let mut data = set.images.data().to_vec();
    for (i, m) in maps.iter().enumerate() {
        if m.len() != per {
            return Err(Error::shape("roar map", format!("{} positions for {per} pixels", m.len())));
        }
        let k = (rate * per as f64).round() as usize;
        for &p in &descending_order(m.data())[..k.min(per)] {
            data[i * per + p] = fill;
        }
    }
    Ok(PatchImageSet {
        images: Tensor::new(set.images.shape().to_vec(), data)?,
        ..set.clone()
    })
}

/// Remove and retrain: for each rate, every image loses its top-`rate` pixels
/// (by its own map) to the training-set mean, a fresh CNN is trained on the
/// perturbed data and evaluated on the perturbed test split. Rates run in
/// parallel on `workers` threads; rate `i` trains with seed `cfg.seed + i + 1`.
pub fn roar(
    ds: &PatchDataset,
    maps: &crate::synthdata::Splits<Vec<Tensor>>,
    rates: &[f64],
    cfg: &TrainConfig,
    workers: usize,
) -> Result<Vec<RoarPoint>> {
    if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::invalid("rates must lie in [0, 1]"));
    }
    let fill = ds.train.images.mean();
    par_map(workers, rates.len(), |i| {
        let rate = rates[i];
        let perturbed = Dataset::Patch(PatchDataset {
            train: roar_perturb(&ds.train, &maps.train, rate, fill)?,
            val: roar_perturb(&ds.val, &maps.val, rate, fill)?,
            test: roar_perturb(&ds.test, &maps.test, rate, fill)?,
        });
        let seed = cfg.seed.wrapping_add(i as u64 + 1);
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let run = train_classifier(&Model::cnn(seed), &perturbed, &run_cfg).and_then(|(m, _)| accuracy(&m, &perturbed, 2));
        Ok(match run {
            Ok(a) => RoarPoint {
                rate,
                accuracy: Some(a),
                error: None,
            },
            Err(e) if e.is_numeric() => RoarPoint {
                rate,
                accuracy: None,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        })
    })
}

/// Accuracy against rate over the runs that finished.
pub fn roar_curve(points: &[RoarPoint]) -> Result<Curve> {
    let ok: Vec<&RoarPoint> = points.iter().filter(|p| p.accuracy.is_some()).collect();
    Curve::new(
        "roar",
        ok.iter().map(|p| p.rate).collect(),
        ok.iter().filter_map(|p| p.accuracy).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_patch_dataset, SplitSizes};

    /// Two-class linear score: logits `[w·x + b, 0]`.
    struct Linear {
        w: Vec<f64>,
        b: f64,
    }

    impl DenseClassifier for Linear {
        fn logits_dense(&self, x: &Tensor) -> Result<Tensor> {
            let d = self.w.len();
            let rows = x.data().chunks(d).flat_map(|r| {
                let s: f64 = r.iter().zip(&self.w).map(|(a, b)| a * b).sum();
                [s + self.b, 0.0]
            });
            Tensor::new([x.len() / d, 2], rows.collect())
        }

        fn target_gradient(&self, x: &Tensor, _target: usize) -> Result<Tensor> {
            Ok(Tensor::from_fn(x.shape().to_vec(), |k| self.w[k % self.w.len()]))
        }
    }

    fn linear(seed: u64, d: usize) -> (Linear, Tensor) {
        let mut s = RngStream::new(seed, 0);
        let w: Vec<f64> = (0..d).map(|_| s.normal()).collect();
        (Linear { w, b: 0.1 }, s.uniform_tensor(&[d], 0.0, 1.0))
    }

    #[test]
    fn linear_gradient_times_input_is_exact() {
        let (m, x) = linear(1, 64);
        let raw = Tensor::from_fn([8, 8], |k| m.w[k] * x.data()[k]);
        let map = crate::attribution::normalize(&raw);
        let zero = Tensor::zeros([64]);
        let mut s = RngStream::new(2, 0);
        let out = sensitivity_n(&m, &x, 0, &map, &zero, &[1, 2, 4, 8, 16, 32], 200, Degenerate::Error, &mut s).unwrap();
        for &r in &out.curve.ys {
            assert!((r - 1.0).abs() < 1e-9, "{r}");
        }
        assert!(out.degenerate.iter().all(|d| !d));
    }

    #[test]
    fn grouped_positions_are_exact_too() {
        // 8 positions of 4 elements each, map = group sums of w⊙x
        let (m, x) = linear(3, 32);
        let raw = Tensor::from_fn([8], |p| (0..4).map(|j| m.w[p * 4 + j] * x.data()[p * 4 + j]).sum());
        let mut s = RngStream::new(4, 0);
        let out = sensitivity_n(&m, &x, 0, &raw, &Tensor::zeros([32]), &[1, 3, 5], 100, Degenerate::Error, &mut s).unwrap();
        assert!(out.curve.ys.iter().all(|r| (r - 1.0).abs() < 1e-9));
    }

    #[test]
    fn constant_map_degenerates() {
        let (m, x) = linear(5, 16);
        let map = Tensor::full([16], 0.5);
        let z = Tensor::zeros([16]);
        let mut s = RngStream::new(6, 0);
        let e = sensitivity_n(&m, &x, 0, &map, &z, &[4], 50, Degenerate::Error, &mut s).unwrap_err();
        assert!(matches!(e, Error::UndefinedCorrelation(_)));
        let out = sensitivity_n(&m, &x, 0, &map, &z, &[4], 50, Degenerate::Zero, &mut s).unwrap();
        assert_eq!((out.curve.ys[0], out.degenerate[0]), (0.0, true));
        assert!(sensitivity_n(&m, &x, 0, &map, &z, &[17], 50, Degenerate::Zero, &mut s).is_err());
    }

    #[test]
    fn pct_endpoints_are_degenerate() {
        let (m, x) = linear(7, 30);
        let map = crate::attribution::normalize(&Tensor::from_fn([30], |k| m.w[k] * x.data()[k]));
        let z = Tensor::zeros([30]);
        let mut s = RngStream::new(8, 0);
        let out = sensitivity_pct(&m, &x, 0, &map, &z, &[0.0, 0.1, 0.5, 1.0], 50, Degenerate::Zero, &mut s).unwrap();
        assert_eq!(out.degenerate, vec![true, false, false, true]);
        assert_eq!(out.curve.ys[0], 0.0);
        assert_eq!(out.curve.ys[3], 0.0);
        assert!((out.curve.ys[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn states_form_a_permutation() {
        let from = Tensor::from_fn([6, 2], |k| k as f64 + 1.0);
        let to = Tensor::zeros([6, 2]);
        let order = descending_order(&[0.3, 0.9, 0.1, 0.9, 0.5, 0.0]);
        let st = step_states(&from, &to, &order, 2, 4).unwrap();
        assert_eq!(st.len(), 3);
        assert_eq!(st.last().unwrap(), &to);
        let mut touched = vec![0; 6];
        for w in st.windows(2) {
            for p in 0..6 {
                if w[0].data()[2 * p] != w[1].data()[2 * p] {
                    touched[p] += 1;
                }
            }
        }
        assert_eq!(touched, vec![1; 6]);
        // positions 1 and 3 tie at 0.9, so the lower index goes first
        assert_eq!(&order[..2], &[1, 3]);
    }

    #[test]
    fn deletion_rearrangement() {
        let mut s = RngStream::new(9, 0);
        let w: Vec<f64> = (0..25).map(|_| s.uniform()).collect();
        let m = Linear { w: w.clone(), b: -3.0 };
        let x = s.uniform_tensor(&[25], 0.0, 1.0);
        let oracle = Tensor::from_fn([25], |k| w[k] * x.data()[k]);
        let reversed = oracle.map(|v| -v);
        let z = Tensor::zeros([25]);
        for batch in [1, 3, 10] {
            let good = insertion_deletion(&m, &x, 0, &oracle, batch, &z, &z).unwrap();
            let bad = insertion_deletion(&m, &x, 0, &reversed, batch, &z, &z).unwrap();
            assert!(good.del_auc <= bad.del_auc + 1e-15);
            assert!(good.ins_auc >= bad.ins_auc - 1e-15);
            let last = *good.deletion.ys.last().unwrap();
            let at_zero = 1.0 / (1.0 + 3f64.exp());
            assert!((last - at_zero).abs() < 1e-15);
            assert_eq!(*good.deletion.xs.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn input_equal_to_baseline_is_flat() {
        let (m, x) = linear(10, 16);
        let map = Tensor::from_fn([16], |k| (k * 7 % 16) as f64);
        let r = insertion_deletion(&m, &x, 0, &map, 3, &x, &x).unwrap();
        let c = r.insertion.ys[0];
        assert!(r.insertion.ys.iter().all(|&v| v == c));
        assert!((r.ins_auc - c).abs() < 1e-15);
        assert!(insertion_deletion(&m, &x, 0, &map, 0, &x, &x).is_err());
    }

    #[test]
    fn roar_perturbation_hits_top_pixels() {
        let d = gen_patch_dataset(1, SplitSizes::new(4, 2, 2)).unwrap();
        let maps: Vec<Tensor> = d.test.bboxes.iter().map(|b| Tensor::from_fn([16, 16], |k| b.contains(k / 16, k % 16) as u8 as f64)).collect();
        let p = roar_perturb(&d.test, &maps, 16.0 / 256.0, -1.0).unwrap();
        for (i, b) in d.test.bboxes.iter().enumerate() {
            let img = p.image(i).unwrap();
            for k in 0..256 {
                assert_eq!(img.data()[k] == -1.0, b.contains(k / 16, k % 16));
            }
        }
        let same = roar_perturb(&d.test, &maps, 0.0, -1.0).unwrap();
        assert_eq!(same, d.test);
        assert!(roar_perturb(&d.test, &maps[..1], 0.5, 0.0).is_err());
    }

    #[test]
    fn roar_curve_skips_failed_runs() {
        let pts = vec![
            RoarPoint { rate: 0.1, accuracy: Some(0.9), error: None },
            RoarPoint { rate: 0.5, accuracy: None, error: Some("diverged".into()) },
            RoarPoint { rate: 0.9, accuracy: Some(0.4), error: None },
        ];
        let c = roar_curve(&pts).unwrap();
        assert_eq!(c.xs, vec![0.1, 0.9]);
    }
}
