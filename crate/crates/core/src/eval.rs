//! Decoding mixture components into poses and scoring them with OKS-based
//! average precision.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::types::{box_iou, pseudo_bbox, KeypointSet, MixtureField, PersonAnnotation, SkeletonSpec};

/// Default presence threshold for decoding.
pub const SCORE_THRESH: f64 = 1e-4;
/// Default pseudo-box IoU above which NMS suppresses.
pub const NMS_IOU: f64 = 0.7;

/// One candidate person: component means without the auxiliary center.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePrediction<T> {
    pub keypoints: KeypointSet<T>,
    /// The component's presence probability `o`.
    pub score: T,
    pub component: usize,
}

/// Every component with `o >= score_thresh`, in component order.
pub fn decode<T: Real>(field: &MixtureField<T>, score_thresh: T) -> Vec<PosePrediction<T>> {
    let k = field.num_keypoints().saturating_sub(1);
    field
        .o()
        .iter()
        .enumerate()
        .filter(|&(_, &o)| o >= score_thresh)
        .map(|(m, &o)| {
            let mu = field.mu(m);
            PosePrediction {
                keypoints: KeypointSet::all_visible((0..k).map(|j| [mu[2 * j], mu[2 * j + 1]]).collect()),
                score: o,
                component: m,
            }
        })
        .collect()
}

/// Greedy suppression on pseudo boxes. Output is sorted by descending score,
/// ties by ascending component index.
pub fn nms<T: Real>(cands: &[PosePrediction<T>], iou_thresh: T) -> Vec<PosePrediction<T>> {
    let mut order: Vec<&PosePrediction<T>> = cands.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal).then(a.component.cmp(&b.component)));
    let mut kept: Vec<(PosePrediction<T>, _)> = Vec::new();
    for c in order {
        let Ok(bb) = pseudo_bbox(&c.keypoints) else { continue };
        if kept.iter().all(|(_, k)| box_iou(&bb, k) <= iou_thresh) {
            kept.push((c.clone(), bb));
        }
    }
    kept.into_iter().map(|(c, _)| c).collect()
}

/// Object keypoint similarity against a ground-truth person.
pub fn oks<T: Real>(pred: &KeypointSet<T>, gt: &PersonAnnotation<T>, skeleton: &SkeletonSpec) -> Result<T> {
    let k = skeleton.num_keypoints();
    if pred.len() < k || gt.keypoints.len() < k {
        return Err(Error::Shape {
            op: "oks",
            detail: format!("{} predicted and {} ground-truth keypoints for K = {k}", pred.len(), gt.keypoints.len()),
        });
    }
    let s2 = gt.bbox.area();
    let mut total = T::zero();
    let mut n = 0usize;
    for j in (0..k).filter(|&j| gt.keypoints.is_visible(j)) {
        let [px, py] = pred.coords()[j];
        let [gx, gy] = gt.keypoints.coords()[j];
        let d2 = (px - gx) * (px - gx) + (py - gy) * (py - gy);
        let kappa = T::lit(skeleton.kappas[j]);
        let denom = T::lit(2.0) * s2 * kappa * kappa;
        total += if d2 == T::zero() { T::one() } else { (-d2 / denom).exp() };
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(total / T::lit(n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub threshold: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Mean over OKS thresholds 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub curves: Vec<PrCurve>,
}

impl EvalResult {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        writeln!(s, "AP,{}", self.ap).ok();
        writeln!(s, "AP50,{}", self.ap50).ok();
        writeln!(s, "AP75,{}", self.ap75).ok();
        for c in &self.curves {
            writeln!(s, "AP@{:.2},{}", c.threshold, c.ap).ok();
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("threshold,recall,precision\n");
        for c in &self.curves {
            for (r, p) in c.recall.iter().zip(&c.precision) {
                writeln!(s, "{:.2},{r},{p}", c.threshold).ok();
            }
        }
        s
    }
}

pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Per-scene scores and OKS matrix (`oks[p][g]`) of already-computed
/// similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatches {
    pub scores: Vec<f64>,
    pub oks: Vec<Vec<f64>>,
    pub num_gts: usize,
}

/// Greedy matching and 101-point interpolated precision at one threshold.
pub fn precision_recall(scenes: &[SceneMatches], thresh: f64) -> PrCurve {
    let mut order: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| (0..sc.scores.len()).map(move |p| (s, p)))
        .collect();
    // Stable sort keeps scene then candidate order among equal scores.
    order.sort_by(|&(s1, p1), &(s2, p2)| {
        scenes[s2].scores[p2]
            .partial_cmp(&scenes[s1].scores[p1])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let total_gts: usize = scenes.iter().map(|s| s.num_gts).sum();
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.num_gts]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (s, p) in order {
        let best = (0..scenes[s].num_gts)
            .filter(|&g| !taken[s][g] && scenes[s].oks[p][g] >= thresh)
            .fold(None, |acc: Option<usize>, g| match acc {
                Some(b) if scenes[s].oks[p][b] >= scenes[s].oks[p][g] => Some(b),
                _ => Some(g),
            });
        match best {
            Some(g) => {
                taken[s][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recall.push(if total_gts > 0 { tp as f64 / total_gts as f64 } else { 0.0 });
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let ap = interpolated_ap(&recall, &precision);
    PrCurve {
        threshold: thresh,
        recall,
        precision,
        ap,
    }
}

/// Mean of the precision envelope sampled at recall 0, 0.01, ..., 1.
pub fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let at = recall.partition_point(|&x| x < r - 1e-12);
        if at < env.len() {
            sum += env[at];
        }
    }
    sum / 101.0
}

pub fn average_precision_from_matches(scenes: &[SceneMatches], thresholds: &[f64]) -> EvalResult {
    let curves: Vec<PrCurve> = thresholds.iter().map(|&t| precision_recall(scenes, t)).collect();
    let at = |t: f64| {
        curves
            .iter()
            .find(|c| (c.threshold - t).abs() < 1e-9)
            .map(|c| c.ap)
            .unwrap_or_else(|| precision_recall(scenes, t).ap)
    };
    let ap = if curves.is_empty() {
        0.0
    } else {
        curves.iter().map(|c| c.ap).sum::<f64>() / curves.len() as f64
    };
    EvalResult {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        curves,
    }
}

pub fn scene_matches(
    preds: &[PosePrediction<f64>],
    gts: &[PersonAnnotation<f64>],
    skeleton: &SkeletonSpec,
) -> Result<SceneMatches> {
    let oks = preds
        .iter()
        .map(|p| gts.iter().map(|g| oks(&p.keypoints, g, skeleton)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneMatches {
        scores: preds.iter().map(|p| p.score).collect(),
        oks,
        num_gts: gts.len(),
    })
}

/// COCO-style OKS AP over aligned scenes.
pub fn average_precision(
    preds: &[Vec<PosePrediction<f64>>],
    gts: &[Vec<PersonAnnotation<f64>>],
    skeleton: &SkeletonSpec,
    thresholds: &[f64],
) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(crate::error::invalid(format!("{} prediction scenes for {} ground-truth scenes", preds.len(), gts.len())));
    }
    let scenes = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| scene_matches(p, g, skeleton))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_precision_from_matches(&scenes, thresholds))
}

/// Mean over scenes of the fraction of the top `n_gt` kept predictions
/// whose best-matching person (OKS >= `oks_thresh`) was already claimed by
/// a higher-scored prediction. `preds` must be sorted by score.
pub fn duplicate_rate(
    preds: &[Vec<PosePrediction<f64>>],
    gts: &[Vec<PersonAnnotation<f64>>],
    skeleton: &SkeletonSpec,
    oks_thresh: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        if g.is_empty() {
            continue;
        }
        let top = &p[..p.len().min(g.len())];
        let m = scene_matches(top, g, skeleton)?;
        let mut claimed = vec![false; g.len()];
        let mut dups = 0usize;
        for row in &m.oks {
            let best = (0..g.len()).fold(None, |acc: Option<usize>, j| match acc {
                Some(b) if row[b] >= row[j] => Some(b),
                _ => Some(j),
            });
            if let Some(b) = best.filter(|&b| row[b] >= oks_thresh) {
                if claimed[b] {
                    dups += 1;
                }
                claimed[b] = true;
            }
        }
        total += dups as f64 / g.len() as f64;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BBox;

    fn person(coords: Vec<[f64; 2]>, bbox: [f64; 4]) -> PersonAnnotation<f64> {
        PersonAnnotation::new(
            KeypointSet::all_visible(coords),
            BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).unwrap(),
            None,
        )
        .unwrap()
    }

    fn pred(coords: Vec<[f64; 2]>, score: f64, component: usize) -> PosePrediction<f64> {
        PosePrediction {
            keypoints: KeypointSet::all_visible(coords),
            score,
            component,
        }
    }

    fn one_kp_skeleton() -> SkeletonSpec {
        SkeletonSpec::new("one", vec!["p".into()], vec![0.1], vec![], None).unwrap()
    }

    #[test]
    fn decode_examples() {
        let f = MixtureField::new(4, vec![1.0, 2.0, 9.0, 9.0, 3.0, 4.0, 9.0, 9.0], vec![1.0; 8], vec![0.5, 1e-5]).unwrap();
        assert!(decode(&f, 0.6).is_empty());
        assert_eq!(decode(&f, 0.0).len(), 2);
        let d = decode(&f, 1e-4);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].keypoints.coords(), &[[1.0, 2.0]]);
        assert_eq!(d[0].score, 0.5);
        let eq = MixtureField::new(4, vec![0.0; 8], vec![1.0; 8], vec![1e-4, 1e-4]).unwrap();
        assert_eq!(decode(&eq, 1e-4).len(), 2);
    }

    #[test]
    fn nms_examples() {
        let pose = vec![[0.0, 0.0], [10.0, 10.0]];
        let kept = nms(&[pred(pose.clone(), 0.8, 1), pred(pose.clone(), 0.9, 0)], 0.7);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let far = vec![[50.0, 50.0], [60.0, 60.0]];
        assert_eq!(nms(&[pred(pose.clone(), 0.9, 0), pred(far, 0.8, 1)], 0.7).len(), 2);
        // Boxes [0,10]x[0,10] and [0,7]x[0,10]: IoU exactly 0.7.
        let narrow = vec![[0.0, 0.0], [7.0, 10.0]];
        assert_eq!(nms(&[pred(pose, 0.9, 0), pred(narrow, 0.8, 1)], 0.7).len(), 2);
    }

    #[test]
    fn nms_ties_prefer_lower_component() {
        let pose = vec![[0.0, 0.0], [10.0, 10.0]];
        let kept = nms(&[pred(pose.clone(), 0.5, 7), pred(pose, 0.5, 3)], 0.7);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].component, 3);
    }

    #[test]
    fn oks_examples() {
        let sk = one_kp_skeleton();
        let gt = person(vec![[5.0, 5.0]], [0.0, 0.0, 10.0, 10.0]);
        assert_eq!(oks(&gt.keypoints, &gt, &sk).unwrap(), 1.0);
        // s * kappa = 1 here, so d = 100 s kappa = 100.
        let far = KeypointSet::all_visible(vec![[105.0, 5.0]]);
        assert!(oks(&far, &gt, &sk).unwrap() <= 1e-12);
        let inf = KeypointSet::all_visible(vec![[f64::INFINITY, 5.0]]);
        assert_eq!(oks(&inf, &gt, &sk).unwrap(), 0.0);
        // d^2 = 2 s^2 kappa^2 = 2.
        let p = KeypointSet::all_visible(vec![[6.0, 6.0]]);
        assert!((oks(&p, &gt, &sk).unwrap() - (-1f64).exp()).abs() < 1e-15);
        let hidden = PersonAnnotation::new(
            KeypointSet::new(vec![[5.0, 5.0]], vec![false]).unwrap(),
            BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            None,
        )
        .unwrap();
        assert!(matches!(oks(&p, &hidden, &sk), Err(Error::NoVisibleKeypoints)));
    }

    #[test]
    fn oks_translation_and_scale_invariance() {
        let sk = SkeletonSpec::synthetic();
        let g = vec![[10.0, 5.0], [3.0, 20.0], [17.0, 20.0], [6.0, 38.0], [14.0, 38.0]];
        let p: Vec<[f64; 2]> = g.iter().map(|&[x, y]| [x + 0.7, y - 1.1]).collect();
        let base = oks(&KeypointSet::all_visible(p.clone()), &person(g.clone(), [0.0, 0.0, 20.0, 40.0]), &sk).unwrap();
        let shift = |v: &Vec<[f64; 2]>, c: f64, t: f64| v.iter().map(|&[x, y]| [c * x + t, c * y + t]).collect::<Vec<_>>();
        let moved = oks(
            &KeypointSet::all_visible(shift(&p, 1.0, 4.0)),
            &person(shift(&g, 1.0, 4.0), [4.0, 4.0, 24.0, 44.0]),
            &sk,
        )
        .unwrap();
        let scaled = oks(
            &KeypointSet::all_visible(shift(&p, 2.5, 0.0)),
            &person(shift(&g, 2.5, 0.0), [0.0, 0.0, 50.0, 100.0]),
            &sk,
        )
        .unwrap();
        assert!((base - moved).abs() < 1e-12 && (base - scaled).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_predictors() {
        let sk = SkeletonSpec::synthetic();
        let g = vec![[10.0, 5.0], [3.0, 20.0], [17.0, 20.0], [6.0, 38.0], [14.0, 38.0]];
        let gts = vec![vec![person(g.clone(), [0.0, 0.0, 20.0, 40.0])], vec![
            person(g.clone(), [0.0, 0.0, 20.0, 40.0]),
            person(g.iter().map(|&[x, y]| [x + 30.0, y]).collect(), [30.0, 0.0, 50.0, 40.0]),
        ]];
        let perfect: Vec<Vec<PosePrediction<f64>>> = gts
            .iter()
            .enumerate()
            .map(|(s, ps)| ps.iter().enumerate().map(|(i, p)| pred(p.keypoints.coords().to_vec(), 0.1 + 0.3 * (s + i) as f64, i)).collect())
            .collect();
        let r = average_precision(&perfect, &gts, &sk, &oks_thresholds()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        let empty = vec![vec![], vec![]];
        let r = average_precision(&empty, &gts, &sk, &oks_thresholds()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (0.0, 0.0, 0.0));
        assert!(r.metrics_csv().starts_with("metric,value\nAP,0\n"));
    }

    /// Every assignment consistent with the greedy rule, found by trying all
    /// gt choices per prediction in score order and keeping the one that
    /// always picks the best available match.
    fn brute_force_tp(scores: &[f64], oks: &[Vec<f64>], thresh: f64) -> Vec<bool> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let n_g = oks[0].len();
        // Enumerate all maps pred -> Option<gt> and keep the unique one that is
        // injective and greedy-optimal.
        let choices = n_g + 1;
        let total = choices.pow(scores.len() as u32);
        for code in 0..total {
            let mut assign = vec![None; scores.len()];
            let mut c = code;
            for a in assign.iter_mut() {
                let v = c % choices;
                c /= choices;
                *a = if v == 0 { None } else { Some(v - 1) };
            }
            let mut used = vec![false; n_g];
            let mut ok = true;
            for &p in &order {
                let avail: Vec<usize> = (0..n_g).filter(|&g| !used[g] && oks[p][g] >= thresh).collect();
                let best = avail.iter().copied().fold(None, |acc: Option<usize>, g| match acc {
                    Some(b) if oks[p][b] >= oks[p][g] => Some(b),
                    _ => Some(g),
                });
                if assign[p] != best {
                    ok = false;
                    break;
                }
                if let Some(g) = best {
                    used[g] = true;
                }
            }
            if ok {
                return assign.iter().map(Option::is_some).collect();
            }
        }
        unreachable!("greedy assignment always exists")
    }

    #[test]
    fn greedy_matching_matches_enumeration() {
        let scores = vec![0.6, 0.9, 0.3];
        let oks = vec![vec![0.8, 0.55], vec![0.7, 0.2], vec![0.52, 0.9]];
        for t in oks_thresholds() {
            let m = SceneMatches {
                scores: scores.clone(),
                oks: oks.clone(),
                num_gts: 2,
            };
            let curve = precision_recall(&[m], t);
            let tp = brute_force_tp(&scores, &oks, t);
            let mut order: Vec<usize> = (0..3).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
            let mut hits = 0;
            for (i, &p) in order.iter().enumerate() {
                hits += tp[p] as usize;
                assert_eq!(curve.recall[i], hits as f64 / 2.0, "t = {t}");
                assert_eq!(curve.precision[i], hits as f64 / (i + 1) as f64);
            }
        }
        // At 0.5: 0.9 -> gt0, 0.6 -> gt1 (gt0 taken), 0.3 -> none.
        let m = SceneMatches { scores, oks, num_gts: 2 };
        let c = precision_recall(&[m], 0.5);
        assert_eq!(c.recall, vec![0.5, 1.0, 1.0]);
        assert_eq!(c.precision, vec![1.0, 1.0, 2.0 / 3.0]);
        assert_eq!(c.ap, 1.0);
    }

    #[test]
    fn interpolation_examples() {
        // One hit out of two gts: precision 1 up to recall 0.5.
        assert!((interpolated_ap(&[0.5], &[1.0]) - 51.0 / 101.0).abs() < 1e-15);
        assert_eq!(interpolated_ap(&[], &[]), 0.0);
        // Envelope lifts the dip.
        let ap = interpolated_ap(&[0.5, 0.5, 1.0], &[1.0, 0.5, 2.0 / 3.0]);
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_rate_counts_shared_matches() {
        let sk = one_kp_skeleton();
        let gts = vec![vec![person(vec![[5.0, 5.0]], [0.0, 0.0, 10.0, 10.0]), person(vec![[30.0, 5.0]], [25.0, 0.0, 35.0, 10.0])]];
        let dup = vec![vec![pred(vec![[5.0, 5.0]], 0.9, 0), pred(vec![[5.2, 5.0]], 0.8, 1), pred(vec![[30.0, 5.0]], 0.7, 2)]];
        assert_eq!(duplicate_rate(&dup, &gts, &sk, 0.5).unwrap(), 0.5);
        let clean = vec![vec![pred(vec![[5.0, 5.0]], 0.9, 0), pred(vec![[30.0, 5.0]], 0.8, 1)]];
        assert_eq!(duplicate_rate(&clean, &gts, &sk, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn csv_shapes() {
        let m = SceneMatches {
            scores: vec![0.9],
            oks: vec![vec![1.0]],
            num_gts: 1,
        };
        let r = average_precision_from_matches(&[m], &oks_thresholds());
        assert_eq!(r.metrics_csv().lines().count(), 1 + 3 + 10);
        assert_eq!(r.curves_csv().lines().count(), 1 + 10);
        assert!(r.curves_csv().lines().nth(1).unwrap().starts_with("0.50,1,1"));
    }
}
