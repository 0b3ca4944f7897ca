//! Scalar reference implementations used by the acceptance and oracle tests.
//! Nothing here calls into the engine's scoring, matching, or AP code.
#![allow(dead_code)]

pub type Rect = [i64; 4];

pub fn rect_iou(a: Rect, b: Rect) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0) as f64;
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0) as f64;
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: Rect| ((r[2] - r[0]) * (r[3] - r[1])) as f64;
    inter / (area(a) + area(b) - inter)
}

/// What a response should parse to.
#[derive(Debug, Clone)]
pub enum Intent {
    Invalid,
    NoObjects,
    Boxes(Vec<(Rect, f64)>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub r_iou: f64,
    pub r_conf: f64,
    pub r_format: f64,
    pub total: f64,
}

/// Detection reward by selection: repeatedly take the highest-confidence
/// unprocessed prediction (earliest on ties), give it the free GT of highest
/// IoU (earliest on ties), keep the pair only when IoU > 0 and IoU >= tau.
pub fn oracle_detection(intent: &Intent, gts: &[Rect], tau: f64, w: [f64; 3]) -> Scores {
    let (r_iou, r_conf, r_format) = match intent {
        Intent::Invalid => (0.0, 0.0, 0.0),
        Intent::NoObjects if gts.is_empty() => (1.0, 1.0, 1.0),
        Intent::NoObjects => (0.0, 0.0, 1.0),
        Intent::Boxes(preds) => {
            let mut done = vec![false; preds.len()];
            let mut free = vec![true; gts.len()];
            let (mut si, mut sc) = (0.0, 0.0);
            for _ in 0..preds.len() {
                let mut pick = None;
                for (i, p) in preds.iter().enumerate() {
                    if !done[i] && pick.is_none_or(|j: usize| p.1 > preds[j].1) {
                        pick = Some(i);
                    }
                }
                let i = pick.unwrap();
                done[i] = true;
                let mut best: Option<(usize, f64)> = None;
                for (g, &gt) in gts.iter().enumerate() {
                    let v = rect_iou(preds[i].0, gt);
                    if free[g] && best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                let c = preds[i].1;
                match best {
                    Some((g, v)) if v > 0.0 && v >= tau => {
                        free[g] = false;
                        si += v;
                        sc += c;
                    }
                    _ => sc += 1.0 - c,
                }
            }
            let n = preds.len() as f64;
            (si / n, sc / n, 1.0)
        }
    };
    Scores {
        r_iou,
        r_conf,
        r_format,
        total: w[0] * r_iou + w[1] * r_conf + w[2] * r_format,
    }
}

/// One image of one category for the AP oracle.
#[derive(Debug, Clone)]
pub struct OracleImage {
    pub id: u64,
    pub dims: (u32, u32),
    pub preds: Vec<(Rect, f64)>,
    pub gts: Vec<Rect>,
}

pub fn pixel_area(r: Rect, dims: (u32, u32)) -> f64 {
    let w = (r[2] - r[0]) as f64 * dims.0 as f64 / 1000.0;
    let h = (r[3] - r[1]) as f64 * dims.1 as f64 / 1000.0;
    w * h
}

/// 0 small, 1 medium, 2 large.
pub fn size_class(r: Rect, dims: (u32, u32)) -> usize {
    let a = pixel_area(r, dims);
    if a < 1024.0 {
        0
    } else if a < 9216.0 {
        1
    } else {
        2
    }
}

enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Greedy matching of `dets` (already in processing order) for one image.
fn match_image(dets: &[(Rect, f64)], img: &OracleImage, t: f64, bucket: Option<usize>) -> Vec<Outcome> {
    let ignored: Vec<bool> = img
        .gts
        .iter()
        .map(|&g| bucket.is_some_and(|b| size_class(g, img.dims) != b))
        .collect();
    let mut used = vec![false; img.gts.len()];
    let mut out = Vec::new();
    for &(d, _) in dets {
        let mut hit = None;
        for pass in [false, true] {
            let mut best: Option<(usize, f64)> = None;
            for (g, &gt) in img.gts.iter().enumerate() {
                if used[g] || ignored[g] != pass {
                    continue;
                }
                let v = rect_iou(d, gt);
                if v >= t && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                hit = Some((g, pass));
                break;
            }
        }
        out.push(match hit {
            Some((g, ign)) => {
                used[g] = true;
                if ign {
                    Outcome::Ignored
                } else {
                    Outcome::Tp
                }
            }
            None if bucket.is_some_and(|b| size_class(d, img.dims) != b) => Outcome::Ignored,
            None => Outcome::Fp,
        });
    }
    out
}

/// AP from scratch: for every prefix of the global ranking, re-run matching on
/// the prefix alone and record a PR point when the newest detection counts.
/// Interpolated precision at recall r is the best precision at any point with
/// recall >= r.
pub fn oracle_ap(images: &[OracleImage], t: f64, bucket: Option<usize>, max_det: usize) -> Option<f64> {
    let npos: usize = images
        .iter()
        .map(|img| {
            img.gts
                .iter()
                .filter(|&&g| bucket.is_none_or(|b| size_class(g, img.dims) == b))
                .count()
        })
        .sum();
    if npos == 0 {
        return None;
    }
    // (confidence, image id, emission index, image slot)
    let mut ranking: Vec<(f64, u64, usize, usize)> = Vec::new();
    for (slot, img) in images.iter().enumerate() {
        let mut mine: Vec<(f64, u64, usize, usize)> =
            img.preds.iter().enumerate().map(|(e, p)| (p.1, img.id, e, slot)).collect();
        mine.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.2.cmp(&b.2)));
        mine.truncate(max_det);
        ranking.extend(mine);
    }
    ranking.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut points: Vec<(f64, f64)> = Vec::new();
    for k in 1..=ranking.len() {
        let prefix = &ranking[..k];
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut newest_counts = false;
        for (slot, img) in images.iter().enumerate() {
            let dets: Vec<(usize, (Rect, f64))> = prefix
                .iter()
                .enumerate()
                .filter(|(_, r)| r.3 == slot)
                .map(|(pos, r)| (pos, img.preds[r.2]))
                .collect();
            let plain: Vec<(Rect, f64)> = dets.iter().map(|d| d.1).collect();
            for ((pos, _), o) in dets.iter().zip(match_image(&plain, img, t, bucket)) {
                match o {
                    Outcome::Tp => tp += 1,
                    Outcome::Fp => fp += 1,
                    Outcome::Ignored => continue,
                }
                if *pos == k - 1 {
                    newest_counts = true;
                }
            }
        }
        if newest_counts {
            points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        sum += points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|l| l - z).collect()
}

/// `sum_i A_i ln p(o_i) - beta KL(p || q)` straight from the logits.
pub fn oracle_surrogate(logits: &[f64], ref_logits: &[f64], actions: &[usize], adv: &[f64], beta: f64) -> f64 {
    let lp = log_softmax(logits);
    let lq = log_softmax(ref_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
    let pg: f64 = actions.iter().zip(adv).map(|(&a, &x)| x * lp[a]).sum();
    pg - beta * kl
}
