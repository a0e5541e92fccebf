//! Brute-force reference implementations written with plain loops and `Vec`s,
//! plus randomized comparisons against the library.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use saekit::data::ActivationBatch;
use saekit::metrics::{cosine, roc_curve, row_cosine_matrix, row_max};
use saekit::sae::{batchtopk_sparsify, estimate_batchtopk_threshold, topk_row, Sae, SaeConfig, Variant};
use saekit::stitching::{classify_latents, decoder_cosine_matrix, families_from_edges, FamilyEdge, LatentLabel};

pub const TOL: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn gauss_vec(rng: &mut impl Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.sample(StandardNormal))
}

pub fn random_variant(rng: &mut impl Rng) -> Variant {
    [
        Variant::Relu,
        Variant::TopK,
        Variant::BatchTopK,
        Variant::JumpReluInference,
    ][rng.random_range(0..4)]
}

/// Random SAE with Gaussian parameters and, where the variant needs them,
/// random inference thresholds.
pub fn random_sae(rng: &mut impl Rng, variant: Variant, n: usize, m: usize) -> Sae<f64> {
    let k = rng.random_range(1..=m);
    let cfg = SaeConfig::new(variant, n, m)
        .with_k(k)
        .with_lambda(0.1)
        .with_k_aux(rng.random_range(1..=m));
    let mut sae = Sae::from_parts(
        cfg,
        gauss_matrix(rng, m, n),
        gauss_vec(rng, m) * 0.3,
        gauss_matrix(rng, m, n),
        gauss_vec(rng, n) * 0.3,
    )
    .expect("consistent shapes");
    match variant {
        Variant::BatchTopK => sae.batchtopk_threshold = Some(rng.random_range(0.0..1.0)),
        Variant::JumpReluInference => {
            sae.jump_thresholds = Some(Array1::from_shape_simple_fn(m, || rng.random_range(-0.5..1.0)))
        }
        _ => {}
    }
    sae
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + a.abs().max(b.abs()))
}

fn close_slices(what: &str, got: &[f64], want: &[f64]) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{what}: length {} vs {}", got.len(), want.len()));
    }
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        if !close(*g, *w) {
            return Err(format!("{what}[{i}]: {g} vs {w}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- oracles

pub fn oracle_pre_acts(sae: &Sae<f64>, x: &[f64]) -> Vec<f64> {
    (0..sae.m())
        .map(|i| {
            let mut s = sae.enc_bias[i];
            for (j, xj) in x.iter().enumerate() {
                s += sae.enc_weights[[i, j]] * xj;
            }
            s
        })
        .collect()
}

/// Indices of the `keep` largest positive values, ties to the lower index.
pub fn oracle_top_positive(values: &[f64], keep: usize) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.0).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.into_iter().take(keep).collect()
}

pub fn oracle_encode(sae: &Sae<f64>, x: &[f64]) -> Vec<f64> {
    let z = oracle_pre_acts(sae, x);
    match sae.variant() {
        Variant::Relu => z.iter().map(|v| v.max(0.0)).collect(),
        Variant::TopK => {
            let keep = oracle_top_positive(&z, sae.config.k);
            (0..z.len())
                .map(|i| if keep.contains(&i) { z[i] } else { 0.0 })
                .collect()
        }
        Variant::BatchTopK => {
            let t = sae.batchtopk_threshold.unwrap();
            z.iter().map(|&v| if v > t && v > 0.0 { v } else { 0.0 }).collect()
        }
        Variant::JumpReluInference => {
            let t = sae.jump_thresholds.as_ref().unwrap();
            z.iter().zip(t).map(|(&v, &t)| if v > t { v } else { 0.0 }).collect()
        }
    }
}

pub fn oracle_decode(sae: &Sae<f64>, f: &[f64]) -> Vec<f64> {
    (0..sae.n())
        .map(|j| {
            let mut s = sae.dec_bias[j];
            for (i, fi) in f.iter().enumerate() {
                s += fi * sae.dec_rows[[i, j]];
            }
            s
        })
        .collect()
}

pub fn oracle_batchtopk(z: &Array2<f64>, k: usize) -> Array2<f64> {
    let (b, m) = z.dim();
    let flat: Vec<f64> = z.iter().copied().collect();
    let keep = oracle_top_positive(&flat, b * k);
    let mut out = Array2::zeros((b, m));
    for i in keep {
        out[[i / m, i % m]] = flat[i];
    }
    out
}

/// Mean over consecutive batches of the smallest value BatchTopK keeps.
pub fn oracle_threshold(sae: &Sae<f64>, rows: &[Vec<f64>], k: usize, batch_size: usize) -> Option<f64> {
    let mut mins = Vec::new();
    for chunk in rows.chunks(batch_size) {
        let z: Vec<f64> = chunk.iter().flat_map(|x| oracle_pre_acts(sae, x)).collect();
        let keep = oracle_top_positive(&z, chunk.len() * k);
        if let Some(min) = keep.iter().map(|&i| z[i]).min_by(|a, b| a.partial_cmp(b).unwrap()) {
            mins.push(min);
        }
    }
    (!mins.is_empty()).then(|| mins.iter().sum::<f64>() / mins.len() as f64)
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Pairwise Mann-Whitney statistic: P(score_pos > score_neg) + P(tie) / 2.
pub fn oracle_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (sp, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Components (with at least one edge) of a bipartite graph, found by DFS.
pub fn oracle_components(
    small_m: usize,
    large_m: usize,
    edges: &[(usize, usize)],
) -> BTreeSet<(BTreeSet<usize>, BTreeSet<usize>)> {
    let nodes = small_m + large_m;
    let mut adj = vec![Vec::new(); nodes];
    for &(s, l) in edges {
        adj[s].push(small_m + l);
        adj[small_m + l].push(s);
    }
    let mut seen = vec![false; nodes];
    let mut out = BTreeSet::new();
    for start in 0..nodes {
        if seen[start] || adj[start].is_empty() {
            continue;
        }
        let (mut small, mut large) = (BTreeSet::new(), BTreeSet::new());
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            if v < small_m {
                small.insert(v);
            } else {
                large.insert(v - small_m);
            }
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        out.insert((small, large));
    }
    out
}

// ------------------------------------------------------- single instances

fn rows_of(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn check_encode_decode(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let (n, m) = (rng.random_range(1..7), rng.random_range(1..9));
    let variant = random_variant(&mut rng);
    let sae = random_sae(&mut rng, variant, n, m);
    let rows = rng.random_range(1..6);
    let x = gauss_matrix(&mut rng, rows, n);
    let (z, f) = sae.encode_batch(x.view()).map_err(|e| e.to_string())?;
    let recon = sae.reconstruct_batch(x.view()).map_err(|e| e.to_string())?;
    for (b, xr) in rows_of(&x).iter().enumerate() {
        close_slices("pre_acts", z.row(b).as_slice().unwrap(), &oracle_pre_acts(&sae, xr))?;
        let want = oracle_encode(&sae, xr);
        let got = f.row(b).to_vec();
        let support = |v: &[f64]| v.iter().map(|a| *a != 0.0).collect::<Vec<_>>();
        if support(&got) != support(&want) {
            return Err(format!("{:?} support {:?} vs {:?}", sae.variant(), got, want));
        }
        close_slices("acts", &got, &want)?;
        let single = sae.encode(x.row(b)).map_err(|e| e.to_string())?;
        if single.acts.to_vec() != got {
            return Err("encode and encode_batch disagree".into());
        }
        close_slices("decode", recon.row(b).as_slice().unwrap(), &oracle_decode(&sae, &want))?;

        let contrib = sae.forward_contributions(x.row(b)).map_err(|e| e.to_string())?;
        let active: BTreeSet<usize> = (0..m).filter(|&i| want[i] != 0.0).collect();
        if contrib.per_latent.keys().copied().collect::<BTreeSet<_>>() != active {
            return Err("contribution keys differ from active set".into());
        }
        for (&i, c) in &contrib.per_latent {
            let expect: Vec<f64> = (0..n).map(|j| want[i] * sae.dec_rows[[i, j]]).collect();
            close_slices("contribution", c.as_slice().unwrap(), &expect)?;
        }
        close_slices(
            "contribution sum",
            contrib.recon.as_slice().unwrap(),
            &oracle_decode(&sae, &want),
        )?;
    }
    Ok(())
}

pub fn check_batchtopk(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let (b, m) = (rng.random_range(1..8), rng.random_range(1..9));
    let mut z = gauss_matrix(&mut rng, b, m);
    if rng.random_bool(0.3) {
        // coarse values create exact ties
        z.mapv_inplace(|v| (v * 2.0).round() / 2.0);
    }
    let k = rng.random_range(1..=m);
    let got = batchtopk_sparsify(z.view(), k);
    let want = oracle_batchtopk(&z, k);
    if got != want {
        return Err(format!("batchtopk k={k}\n{z}\n{got}\nvs\n{want}"));
    }
    for r in 0..b {
        let keep = oracle_top_positive(z.row(r).as_slice().unwrap(), k);
        let want: Vec<f64> = (0..m)
            .map(|i| if keep.contains(&i) { z[[r, i]] } else { 0.0 })
            .collect();
        if topk_row(z.row(r), k).to_vec() != want {
            return Err(format!("topk row {r}"));
        }
    }
    Ok(())
}

pub fn check_threshold(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let (n, m) = (rng.random_range(1..6), rng.random_range(1..8));
    let sae = random_sae(&mut rng, Variant::BatchTopK, n, m);
    let count = rng.random_range(1..40);
    let x = gauss_matrix(&mut rng, count, n);
    let (k, bs) = (rng.random_range(1..=m), rng.random_range(1..12));
    let data = ActivationBatch::new(x.clone(), None).map_err(|e| e.to_string())?;
    let got = estimate_batchtopk_threshold(&sae, &data, k, bs).ok();
    let want = oracle_threshold(&sae, &rows_of(&x), k, bs);
    match (got, want) {
        (Some(g), Some(w)) if close(g, w) => Ok(()),
        (None, None) => Ok(()),
        other => Err(format!("threshold {other:?}")),
    }
}

pub fn check_cosine(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let n = rng.random_range(1..8);
    let (p, q) = (rng.random_range(1..8), rng.random_range(1..8));
    let a = gauss_matrix(&mut rng, p, n);
    let b = gauss_matrix(&mut rng, q, n);
    let c = row_cosine_matrix(a.view(), b.view()).map_err(|e| e.to_string())?;
    for i in 0..p {
        for j in 0..q {
            let want = oracle_cosine(a.row(i).as_slice().unwrap(), b.row(j).as_slice().unwrap());
            if !close(c[[i, j]], want) {
                return Err(format!("cos[{i},{j}] {} vs {want}", c[[i, j]]));
            }
            if !close(cosine(a.row(i), b.row(j)).unwrap(), want) {
                return Err("cosine()".into());
            }
        }
    }
    for (i, (v, arg)) in row_max(c.view()).into_iter().enumerate() {
        let best = (0..q).map(|j| c[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        if v != best || c[[i, arg.unwrap()]] != best {
            return Err(format!("row_max {i}"));
        }
    }
    let small = random_sae(&mut rng, Variant::Relu, n, p);
    let large = random_sae(&mut rng, Variant::Relu, n, q);
    let d = decoder_cosine_matrix(&small, &large).map_err(|e| e.to_string())?;
    for i in 0..p {
        for j in 0..q {
            let want = oracle_cosine(
                small.dec_rows.row(i).as_slice().unwrap(),
                large.dec_rows.row(j).as_slice().unwrap(),
            );
            if !close(d[[i, j]], want) {
                return Err("decoder cosine".into());
            }
        }
    }
    Ok(())
}

pub fn check_roc(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let len = rng.random_range(2..40);
    let levels = rng.random_range(2..10);
    let scores: Vec<f64> = (0..len)
        .map(|_| rng.random_range(0..levels) as f64 * 0.25 - 1.0)
        .collect();
    let mut labels: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
    labels[0] = true;
    labels[1] = false;
    labels.shuffle(&mut rng);
    let roc = roc_curve(&scores, &labels).map_err(|e| e.to_string())?;
    let want = oracle_auc(&scores, &labels);
    if !close(roc.auc, want) {
        return Err(format!("auc {} vs {want}", roc.auc));
    }
    let pos = labels.iter().filter(|l| **l).count() as f64;
    let neg = len as f64 - pos;
    for p in &roc.points[1..] {
        let tp = scores
            .iter()
            .zip(&labels)
            .filter(|(s, l)| **l && **s >= p.threshold)
            .count() as f64;
        let fp = scores
            .iter()
            .zip(&labels)
            .filter(|(s, l)| !**l && **s >= p.threshold)
            .count() as f64;
        if !close(p.tpr, tp / pos) || !close(p.fpr, fp / neg) {
            return Err(format!("roc point at {}", p.threshold));
        }
    }
    let last = roc.points.last().unwrap();
    if last.tpr != 1.0 || last.fpr != 1.0 {
        return Err("curve does not end at (1, 1)".into());
    }
    Ok(())
}

pub fn check_components(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let (sm, lm) = (rng.random_range(1..9), rng.random_range(1..9));
    let p = rng.random_range(0.05..0.5);
    let mut edges = Vec::new();
    for s in 0..sm {
        for l in 0..lm {
            if rng.random_bool(p) {
                edges.push((s, l));
            }
        }
    }
    let fams = families_from_edges(
        sm,
        edges
            .iter()
            .map(|&(small, large)| FamilyEdge { small, large, cos: 1.0 })
            .collect(),
    );
    let got: BTreeSet<(BTreeSet<usize>, BTreeSet<usize>)> = fams
        .iter()
        .map(|f| {
            (
                f.small_indices.iter().copied().collect(),
                f.large_indices.iter().copied().collect(),
            )
        })
        .collect();
    if got.len() != fams.len() || got != oracle_components(sm, lm, &edges) {
        return Err(format!("components of {edges:?}"));
    }
    if fams.iter().map(|f| f.edges.len()).sum::<usize>() != edges.len() {
        return Err("edges lost or duplicated".into());
    }

    // end to end through decoder cosines
    let n = rng.random_range(2..6);
    let small = random_sae(&mut rng, Variant::Relu, n, sm);
    let large = random_sae(&mut rng, Variant::Relu, n, lm);
    let theta = rng.random_range(0.1..0.9);
    let cls = classify_latents(&small, &large, theta).map_err(|e| e.to_string())?;
    let mut cos_edges = Vec::new();
    let mut labels = BTreeMap::new();
    for l in 0..lm {
        let mut best = f64::NEG_INFINITY;
        for s in 0..sm {
            let c = oracle_cosine(
                small.dec_rows.row(s).as_slice().unwrap(),
                large.dec_rows.row(l).as_slice().unwrap(),
            );
            best = best.max(c);
            if c >= theta {
                cos_edges.push((s, l));
            }
        }
        labels.insert(
            l,
            if best < theta {
                LatentLabel::Novel
            } else {
                LatentLabel::Reconstruction
            },
        );
    }
    for rec in &cls.latents {
        if labels[&rec.index] != rec.label {
            return Err(format!("label of large latent {}", rec.index));
        }
    }
    let got: BTreeSet<(BTreeSet<usize>, BTreeSet<usize>)> = cls
        .families
        .iter()
        .map(|f| {
            (
                f.small_indices.iter().copied().collect(),
                f.large_indices.iter().copied().collect(),
            )
        })
        .collect();
    if got != oracle_components(sm, lm, &cos_edges) {
        return Err("classify_latents families".into());
    }
    Ok(())
}

/// Runs `check` on `count` seeds derived from `base`; reports the first failure.
pub fn run_many(count: u64, base: u64, check: fn(u64) -> Result<(), String>) -> Result<(), String> {
    for i in 0..count {
        let seed = base.wrapping_mul(1_000_003).wrapping_add(i);
        check(seed).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok(())
}

/// One randomized oracle comparison, seeded by its argument.
pub type Check = fn(u64) -> Result<(), String>;

pub const SUITE: [(&str, Check); 6] = [
    ("encode/decode/forward_contributions", check_encode_decode),
    ("batchtopk_sparsify", check_batchtopk),
    ("threshold estimation", check_threshold),
    ("cosine matrices", check_cosine),
    ("ROC/AUC", check_roc),
    ("connected components", check_components),
];
