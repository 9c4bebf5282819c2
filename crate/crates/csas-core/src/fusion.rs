//! Supervision-by-fusion machinery: superpixels, GLAD reliability/difficulty
//! inference, local/global fusion maps, lowest-reliability replacement and
//! the learning-confidence weights.
//!
//! GLAD models each binary vote as correct with probability
//! `sigmoid(ability / difficulty)`. An EM loop alternates a closed-form
//! posterior over true labels with a line-searched gradient M-step, so the
//! marginal log-likelihood never decreases. Locally the voters are the weak
//! detectors on one image's superpixels; globally each detector votes once
//! per image through its agreement with the detector-average map.

pub mod weak;

use serde::Serialize;

use crate::color::CsasImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// superpixels
// ---------------------------------------------------------------------------

/// Connected label map with `count` regions, labels 0..count.
#[derive(Clone, Debug, PartialEq)]
pub struct Superpixelization {
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

impl Superpixelization {
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// SLIC-style clustering in (color, position) space with connectivity
/// enforcement. `target_count` is approximate; the result stays within
/// roughly 20% of it.
pub fn superpixelize(image: &CsasImage, target_count: usize) -> Result<Superpixelization> {
    let (h, w) = (image.height(), image.width());
    if target_count == 0 {
        return Err(Error::Config("superpixel target must be at least 1".into()));
    }
    if target_count > h * w {
        return Err(Error::Config("more superpixels than pixels requested".into()));
    }
    if target_count == 1 {
        return Ok(Superpixelization {
            labels: vec![0; h * w],
            height: h,
            width: w,
            count: 1,
        });
    }

    let features = image.to_vector_rep();
    let feat = |y: usize, x: usize| -> [f64; 3] {
        [
            features.at3(0, y, x),
            features.at3(1, y, x),
            features.at3(2, y, x),
        ]
    };

    // grid seeding
    let spacing = ((h * w) as f64 / target_count as f64).sqrt();
    let rows = ((h as f64 / spacing).round() as usize).max(1);
    let cols = ((target_count as f64 / rows as f64).round() as usize).max(1);
    let mut centers: Vec<(f64, f64, [f64; 3])> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let cy = (r as f64 + 0.5) * h as f64 / rows as f64 - 0.5;
            let cx = (c as f64 + 0.5) * w as f64 / cols as f64 - 0.5;
            let (iy, ix) = (
                (cy.floor() as usize).min(h - 1),
                (cx.floor() as usize).min(w - 1),
            );
            centers.push((cy, cx, feat(iy, ix)));
        }
    }
    let k = centers.len();
    let compactness = 0.25; // color-vs-position balance for unit-range colors
    let inv_s2 = (compactness / spacing) * (compactness / spacing);

    let mut labels = vec![0usize; h * w];
    for _ in 0..10 {
        // assignment within a 2S window of each center
        let mut best = vec![f64::INFINITY; h * w];
        for (ci, &(cy, cx, cf)) in centers.iter().enumerate() {
            let y0 = ((cy - 2.0 * spacing).floor().max(0.0)) as usize;
            let y1 = ((cy + 2.0 * spacing).ceil() as usize).min(h);
            let x0 = ((cx - 2.0 * spacing).floor().max(0.0)) as usize;
            let x1 = ((cx + 2.0 * spacing).ceil() as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let f = feat(y, x);
                    let dc = (f[0] - cf[0]) * (f[0] - cf[0])
                        + (f[1] - cf[1]) * (f[1] - cf[1])
                        + (f[2] - cf[2]) * (f[2] - cf[2]);
                    let ds = (y as f64 - cy) * (y as f64 - cy)
                        + (x as f64 - cx) * (x as f64 - cx);
                    let d = dc + ds * inv_s2;
                    if d < best[y * w + x] {
                        best[y * w + x] = d;
                        labels[y * w + x] = ci;
                    }
                }
            }
        }
        // update
        let mut acc = vec![(0.0, 0.0, [0.0; 3], 0usize); k];
        for y in 0..h {
            for x in 0..w {
                let l = labels[y * w + x];
                let f = feat(y, x);
                let a = &mut acc[l];
                a.0 += y as f64;
                a.1 += x as f64;
                for (s, v) in a.2.iter_mut().zip(f) {
                    *s += v;
                }
                a.3 += 1;
            }
        }
        for (ci, a) in acc.iter().enumerate() {
            if a.3 > 0 {
                let inv = 1.0 / a.3 as f64;
                centers[ci] = (
                    a.0 * inv,
                    a.1 * inv,
                    [a.2[0] * inv, a.2[1] * inv, a.2[2] * inv],
                );
            }
        }
    }

    enforce_connectivity(&mut labels, h, w);
    let count = relabel(&mut labels);
    Ok(Superpixelization {
        labels,
        height: h,
        width: w,
        count,
    })
}

/// Replace every pixel with the mean saliency of its region.
pub fn superpixel_average(map: &Tensor, sp: &Superpixelization) -> Tensor {
    let (h, w) = (sp.height, sp.width);
    assert_eq!(map.len(), h * w, "map/superpixel size mismatch");
    let mut sums = vec![0.0; sp.count];
    let mut counts = vec![0usize; sp.count];
    for (i, &l) in sp.labels.iter().enumerate() {
        sums[l] += map.data()[i];
        counts[l] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        *s /= c.max(1) as f64;
    }
    let data = sp.labels.iter().map(|&l| sums[l]).collect();
    Tensor::from_vec(&[h, w], data)
}

/// Mean value of `map` within each region.
pub fn region_means(map: &Tensor, sp: &Superpixelization) -> Vec<f64> {
    let mut sums = vec![0.0; sp.count];
    let mut counts = vec![0usize; sp.count];
    for (i, &l) in sp.labels.iter().enumerate() {
        sums[l] += map.data()[i];
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| s / c.max(1) as f64)
        .collect()
}

fn enforce_connectivity(labels: &mut [usize], h: usize, w: usize) {
    // flood-fill components; relabel any component that is not the largest
    // of its label to the dominant neighboring label
    let mut comp = vec![usize::MAX; h * w];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut comp_neighbor = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_label.len();
        let label = labels[start];
        comp_label.push(label);
        comp_size.push(0usize);
        comp_neighbor.push(usize::MAX);
        stack.push(start);
        comp[start] = id;
        while let Some(p) = stack.pop() {
            comp_size[id] += 1;
            let (y, x) = (p / w, p % w);
            let mut neigh = [usize::MAX; 4];
            if y > 0 {
                neigh[0] = p - w;
            }
            if y + 1 < h {
                neigh[1] = p + w;
            }
            if x > 0 {
                neigh[2] = p - 1;
            }
            if x + 1 < w {
                neigh[3] = p + 1;
            }
            for &n in neigh.iter().filter(|&&n| n != usize::MAX) {
                if labels[n] == label {
                    if comp[n] == usize::MAX {
                        comp[n] = id;
                        stack.push(n);
                    }
                } else if comp[n] != usize::MAX {
                    comp_neighbor[id] = comp[n];
                    if comp_neighbor[comp[n]] == usize::MAX {
                        comp_neighbor[comp[n]] = id;
                    }
                }
            }
        }
    }
    // keep the largest component per label, absorb the rest
    let mut largest: std::collections::HashMap<usize, (usize, usize)> =
        std::collections::HashMap::new();
    for (id, (&label, &size)) in comp_label.iter().zip(&comp_size).enumerate() {
        let e = largest.entry(label).or_insert((id, size));
        if size > e.1 {
            *e = (id, size);
        }
    }
    let mut final_label = vec![0usize; comp_label.len()];
    for (id, &label) in comp_label.iter().enumerate() {
        if largest[&label].0 == id {
            final_label[id] = label;
        } else {
            // absorb into an adjacent component's label
            let mut n = comp_neighbor[id];
            if n == usize::MAX {
                n = id;
            }
            final_label[id] = comp_label[n];
        }
    }
    for p in 0..h * w {
        labels[p] = final_label[comp[p]];
    }
}

fn relabel(labels: &mut [usize]) -> usize {
    let mut remap: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for &l in labels.iter() {
        let next = remap.len();
        remap.entry(l).or_insert(next);
    }
    for l in labels.iter_mut() {
        *l = remap[l];
    }
    remap.len()
}

// ---------------------------------------------------------------------------
// GLAD
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct GladConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// Prior probability of the positive label.
    pub prior: f64,
    /// Gaussian prior on abilities, centered at 1.
    pub ability_prior_var: f64,
    /// Gaussian prior on log-difficulties, centered at 0.
    pub difficulty_prior_var: f64,
}

impl Default for GladConfig {
    fn default() -> Self {
        GladConfig {
            max_iter: 60,
            tol: 1e-7,
            prior: 0.5,
            ability_prior_var: 1.0,
            difficulty_prior_var: 1.0,
        }
    }
}

/// Result of one GLAD EM run.
#[derive(Clone, Debug, Serialize)]
pub struct GladFit {
    /// Per-voter ability (can be negative for adversarial voters).
    pub ability: Vec<f64>,
    /// Per-item difficulty, strictly positive.
    pub difficulty: Vec<f64>,
    /// Posterior probability that each item's true label is 1.
    pub posterior: Vec<f64>,
    /// Value of [`glad_objective`] at the fixed point.
    pub log_likelihood: f64,
    /// Objective after every EM iteration (non-decreasing).
    pub ll_trace: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    crate::autodiff::stable_sigmoid(x)
}

fn ln_sigmoid(x: f64) -> f64 {
    // ln σ(x) = -ln(1 + e^{-x}), stable on both tails
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// The objective EM ascends: marginal log-likelihood of the votes plus the
/// Gaussian prior terms on abilities and log-difficulties (constants
/// dropped). Without the priors the model has degenerate directions —
/// declaring one voter perfect or one item impossible raises the bare
/// likelihood without bound.
pub fn glad_objective(votes: &[Vec<u8>], ability: &[f64], log_diff: &[f64], cfg: &GladConfig) -> f64 {
    let penalty: f64 = ability
        .iter()
        .map(|a| -0.5 * (a - 1.0) * (a - 1.0) / cfg.ability_prior_var)
        .sum::<f64>()
        + log_diff
            .iter()
            .map(|u| -0.5 * u * u / cfg.difficulty_prior_var)
            .sum::<f64>();
    glad_marginal_ll(votes, ability, log_diff, cfg.prior) + penalty
}

/// Marginal log-likelihood of the votes under (ability, log-difficulty).
pub fn glad_marginal_ll(votes: &[Vec<u8>], ability: &[f64], log_diff: &[f64], prior: f64) -> f64 {
    let m = votes.len();
    let d = votes[0].len();
    let mut ll = 0.0;
    for j in 0..d {
        let mut l1 = prior.ln();
        let mut l0 = (1.0 - prior).ln();
        for k in 0..m {
            let x = ability[k] * (-log_diff[j]).exp();
            if votes[k][j] == 1 {
                l1 += ln_sigmoid(x);
                l0 += ln_sigmoid(-x);
            } else {
                l1 += ln_sigmoid(-x);
                l0 += ln_sigmoid(x);
            }
        }
        let mx = l1.max(l0);
        ll += mx + ((l1 - mx).exp() + (l0 - mx).exp()).ln();
    }
    ll
}

/// EM inference of voter abilities and item difficulties from binary votes
/// (`votes[k][j]` is voter `k`'s label for item `j`). Needs at least two
/// voters. The expected complete-data objective is ascended with a
/// backtracking line search, so the marginal log-likelihood is
/// non-decreasing across iterations.
pub fn glad_em(votes: &[Vec<u8>], cfg: &GladConfig) -> Result<GladFit> {
    let m = votes.len();
    if m < 2 {
        return Err(Error::Config("GLAD needs at least two voters".into()));
    }
    let d = votes[0].len();
    if d == 0 || votes.iter().any(|v| v.len() != d) {
        return Err(Error::Config("GLAD votes must be a non-empty m x d matrix".into()));
    }

    let mut ability = vec![1.0; m];
    let mut log_diff = vec![0.0; d];
    let mut posterior = vec![0.5; d];
    let mut trace = Vec::new();

    let e_step = |ability: &[f64], log_diff: &[f64], posterior: &mut [f64]| {
        for j in 0..d {
            let mut l1 = cfg.prior.ln();
            let mut l0 = (1.0 - cfg.prior).ln();
            for k in 0..m {
                let x = ability[k] * (-log_diff[j]).exp();
                if votes[k][j] == 1 {
                    l1 += ln_sigmoid(x);
                    l0 += ln_sigmoid(-x);
                } else {
                    l1 += ln_sigmoid(-x);
                    l0 += ln_sigmoid(x);
                }
            }
            let mx = l1.max(l0);
            posterior[j] = (l1 - mx).exp() / ((l1 - mx).exp() + (l0 - mx).exp());
        }
    };

    // expected complete-data log-likelihood plus the parameter priors
    let q_obj = |ability: &[f64], log_diff: &[f64], posterior: &[f64]| -> f64 {
        let mut q = 0.0;
        for j in 0..d {
            let inv_b = (-log_diff[j]).exp();
            for k in 0..m {
                let x = ability[k] * inv_b;
                let c = if votes[k][j] == 1 {
                    posterior[j]
                } else {
                    1.0 - posterior[j]
                };
                q += c * ln_sigmoid(x) + (1.0 - c) * ln_sigmoid(-x);
            }
        }
        q += ability
            .iter()
            .map(|a| -0.5 * (a - 1.0) * (a - 1.0) / cfg.ability_prior_var)
            .sum::<f64>();
        q += log_diff
            .iter()
            .map(|u| -0.5 * u * u / cfg.difficulty_prior_var)
            .sum::<f64>();
        q
    };

    let mut ll_prev = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iter {
        e_step(&ability, &log_diff, &mut posterior);

        // M-step: a few line-searched ascent steps on Q
        for _ in 0..20 {
            let mut ga = vec![0.0; m];
            let mut gu = vec![0.0; d];
            for j in 0..d {
                let inv_b = (-log_diff[j]).exp();
                for k in 0..m {
                    let x = ability[k] * inv_b;
                    let c = if votes[k][j] == 1 {
                        posterior[j]
                    } else {
                        1.0 - posterior[j]
                    };
                    let r = c - sigmoid(x);
                    ga[k] += r * inv_b;
                    gu[j] += -r * x;
                }
            }
            for (k, g) in ga.iter_mut().enumerate() {
                *g += -(ability[k] - 1.0) / cfg.ability_prior_var;
            }
            for (j, g) in gu.iter_mut().enumerate() {
                *g += -log_diff[j] / cfg.difficulty_prior_var;
            }
            let gnorm: f64 = ga.iter().chain(gu.iter()).map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < 1e-10 {
                break;
            }
            let q0 = q_obj(&ability, &log_diff, &posterior);
            let mut eta = 0.5;
            let mut improved = false;
            for _ in 0..30 {
                let na: Vec<f64> = ability.iter().zip(&ga).map(|(a, g)| a + eta * g).collect();
                let nu: Vec<f64> = log_diff.iter().zip(&gu).map(|(u, g)| u + eta * g).collect();
                if q_obj(&na, &nu, &posterior) > q0 {
                    ability = na;
                    log_diff = nu;
                    improved = true;
                    break;
                }
                eta *= 0.5;
            }
            if !improved {
                break;
            }
        }

        let ll = glad_objective(votes, &ability, &log_diff, cfg);
        trace.push(ll);
        if (ll - ll_prev).abs() < cfg.tol {
            ll_prev = ll;
            break;
        }
        ll_prev = ll;
    }
    e_step(&ability, &log_diff, &mut posterior);

    Ok(GladFit {
        ability,
        difficulty: log_diff.iter().map(|u| u.exp()).collect(),
        posterior,
        log_likelihood: ll_prev,
        ll_trace: trace,
    })
}

/// Local-level GLAD: binarize the superpixel-averaged maps of one image at
/// 0.5 and infer per-detector reliabilities and per-superpixel difficulties.
pub fn glad_local(
    region_scores: &[Vec<f64>],
    cfg: &GladConfig,
) -> Result<GladFit> {
    let votes: Vec<Vec<u8>> = region_scores
        .iter()
        .map(|scores| scores.iter().map(|&s| u8::from(s >= 0.5)).collect())
        .collect();
    glad_em(&votes, cfg)
}

/// Global-level GLAD: each detector votes once per image, agreeing (1) when
/// the normalized L1 distance between its map and the detector-average map
/// falls below 0.5.
pub fn glad_global(maps: &WeakMapSet, cfg: &GladConfig) -> Result<GladFit> {
    let n = maps.maps.len();
    let m = maps.detector_count();
    let mut votes = vec![vec![0u8; n]; m];
    for (i, per_detector) in maps.maps.iter().enumerate() {
        let mean = maps.average_map(i);
        for (k, map) in per_detector.iter().enumerate() {
            let dist = map
                .data()
                .iter()
                .zip(mean.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / map.len() as f64;
            votes[k][i] = u8::from(dist < 0.5);
        }
    }
    glad_em(&votes, cfg)
}

// ---------------------------------------------------------------------------
// fusion maps
// ---------------------------------------------------------------------------

/// Per-image, per-detector saliency maps.
#[derive(Clone, Debug)]
pub struct WeakMapSet {
    /// maps[i][k]: image i, detector k, values in [0, 1].
    pub maps: Vec<Vec<Tensor>>,
}

impl WeakMapSet {
    pub fn detector_count(&self) -> usize {
        self.maps.first().map(|m| m.len()).unwrap_or(0)
    }

    /// The detector-average map for one image.
    pub fn average_map(&self, image: usize) -> Tensor {
        let per_detector = &self.maps[image];
        let m = per_detector.len() as f64;
        let mut out = Tensor::zeros(per_detector[0].shape());
        for map in per_detector {
            out.add_assign(map);
        }
        out.scale(1.0 / m)
    }
}

/// Local fusion maps, global fusion maps and the detector-average maps.
#[derive(Clone, Debug)]
pub struct FusionMaps {
    pub kappa: Vec<Tensor>,
    pub pi: Vec<Tensor>,
    pub omega_bar: Vec<Tensor>,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Reliability-weighted detector combinations. Abilities pass through a
/// softmax so the fused maps stay inside [0, 1].
pub fn build_fusion_maps(
    maps: &WeakMapSet,
    local: &[GladFit],
    global: &GladFit,
) -> Result<FusionMaps> {
    let n = maps.maps.len();
    if local.len() != n {
        return Err(Error::Config("one local GLAD fit required per image".into()));
    }
    let global_w = softmax(&global.ability);
    let mut kappa = Vec::with_capacity(n);
    let mut pi = Vec::with_capacity(n);
    let mut omega_bar = Vec::with_capacity(n);
    for i in 0..n {
        let per_detector = &maps.maps[i];
        let local_w = softmax(&local[i].ability);
        let mut k_map = Tensor::zeros(per_detector[0].shape());
        let mut p_map = Tensor::zeros(per_detector[0].shape());
        for (k, map) in per_detector.iter().enumerate() {
            for ((kd, pd), &md) in k_map
                .data_mut()
                .iter_mut()
                .zip(p_map.data_mut().iter_mut())
                .zip(map.data())
            {
                *kd += local_w[k] * md;
                *pd += global_w[k] * md;
            }
        }
        kappa.push(k_map.map(|v| v.clamp(0.0, 1.0)));
        pi.push(p_map.map(|v| v.clamp(0.0, 1.0)));
        omega_bar.push(maps.average_map(i));
    }
    Ok(FusionMaps {
        kappa,
        pi,
        omega_bar,
    })
}

/// Replace the maps of the `count` detectors with the lowest global
/// reliability by the current branch predictions (ties break toward the
/// lowest detector index).
pub fn replace_lowest_reliability(
    maps: &WeakMapSet,
    global: &GladFit,
    branch_maps: &[Tensor],
    count: usize,
) -> Result<WeakMapSet> {
    let m = maps.detector_count();
    if count >= m && count != 0 {
        return Err(Error::Config(format!(
            "cannot replace {count} of {m} detectors"
        )));
    }
    if count == 0 {
        return Ok(maps.clone());
    }
    if branch_maps.len() != maps.maps.len() {
        return Err(Error::Config("one branch map required per image".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        global.ability[a]
            .partial_cmp(&global.ability[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let replaced: std::collections::HashSet<usize> = order.into_iter().take(count).collect();
    let mut out = maps.clone();
    for (i, per_detector) in out.maps.iter_mut().enumerate() {
        for (k, map) in per_detector.iter_mut().enumerate() {
            if replaced.contains(&k) {
                *map = branch_maps[i].clone();
            }
        }
    }
    Ok(out)
}

/// Normalize positives so the largest becomes 1 (all-equal stays uniform).
fn normalize_reciprocal(vals: &[f64]) -> Vec<f64> {
    let recip: Vec<f64> = vals.iter().map(|&v| 1.0 / v.max(1e-12)).collect();
    let mx = recip.iter().cloned().fold(0.0, f64::max).max(1e-12);
    recip.iter().map(|r| r / mx).collect()
}

/// Per-pixel learning-confidence weights for one image: the superpixel-level
/// confidence (reciprocal local difficulty, normalized to [0, 1]) times the
/// image-level confidence (reciprocal global difficulty of this image,
/// normalized across images).
pub fn confidence_weights(
    local: &GladFit,
    sp: &Superpixelization,
    global: &GladFit,
    image_index: usize,
) -> Tensor {
    let gamma = normalize_reciprocal(&local.difficulty);
    let beta = normalize_reciprocal(&global.difficulty);
    let image_conf = beta[image_index];
    let data = sp
        .labels
        .iter()
        .map(|&l| gamma[l] * image_conf)
        .collect();
    Tensor::from_vec(&[sp.height, sp.width], data)
}
