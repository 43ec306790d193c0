//! Brute-force reimplementations of the text metrics: explicit n-gram lists,
//! dense TF-IDF vectors, subsequence enumeration and position scans.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Sent = Vec<String>;

pub fn words(s: &str) -> Sent {
    s.split_whitespace().map(str::to_string).collect()
}

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn bleu(cands: &[Sent], refs: &[Vec<Sent>], n: usize) -> f64 {
    let mut c_len = 0;
    let mut r_len = 0;
    for (c, rs) in cands.iter().zip(refs) {
        c_len += c.len();
        let mut best = rs[0].len();
        for r in rs {
            let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best;
    }
    if c_len == 0 {
        return 0.0;
    }
    let mut logs = 0.0;
    for m in 1..=n {
        let (mut hit, mut tot) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            let cg = grams(c, m);
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &cg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                let mine = count(&cg, g);
                let cap = rs.iter().map(|r| count(&grams(r, m), g)).max().unwrap_or(0);
                hit += mine.min(cap);
            }
            tot += cg.len();
        }
        if hit == 0 || tot == 0 {
            return 0.0;
        }
        logs += (hit as f64 / tot as f64).ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * (logs / n as f64).exp()
}

/// Dense TF-IDF cosine over the full n-gram inventory of the corpus.
pub fn cider(cands: &[Sent], refs: &[Vec<Sent>]) -> f64 {
    let docs = refs.len() as f64;
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut score = 0.0;
        for n in 1..=4 {
            let mut inventory: Vec<Vec<String>> = Vec::new();
            for s in refs.iter().flatten().chain(cands) {
                for g in grams(s, n) {
                    if !inventory.contains(&g) {
                        inventory.push(g);
                    }
                }
            }
            let idf: Vec<f64> = inventory
                .iter()
                .map(|g| {
                    let df = refs
                        .iter()
                        .filter(|set| set.iter().any(|r| count(&grams(r, n), g) > 0))
                        .count();
                    (docs / (1.0 + df as f64)).ln()
                })
                .collect();
            let vec_of = |s: &Sent| -> Vec<f64> {
                let gs = grams(s, n);
                inventory
                    .iter()
                    .zip(&idf)
                    .map(|(g, w)| count(&gs, g) as f64 * w)
                    .collect()
            };
            let vc = vec_of(c);
            let mut sim = 0.0;
            for r in rs {
                let vr = vec_of(r);
                let dot: f64 = vc.iter().zip(&vr).map(|(a, b)| a * b).sum();
                let na = vc.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb = vr.iter().map(|a| a * a).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    sim += dot / (na * nb);
                }
            }
            score += sim / rs.len() as f64 / 4.0;
        }
        total += score;
    }
    total / cands.len() as f64
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|w| it.any(|h| h == *w))
}

/// Longest common subsequence by enumerating subsets of the shorter sequence.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16, "brute-force LCS is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let pick: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        if is_subsequence(&pick, long) {
            best = k;
        }
    }
    best
}

pub fn rouge_l(c: &[String], r: &[String], beta: f64) -> f64 {
    let l = lcs(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (rec, prec) = (l / r.len() as f64, l / c.len() as f64);
    (1.0 + beta * beta) * rec * prec / (rec + beta * beta * prec)
}

pub fn meteor(c: &[String], r: &[String]) -> f64 {
    // Map from candidate position to its aligned reference position.
    let mut taken = vec![false; r.len()];
    let mut map: Vec<Option<usize>> = Vec::with_capacity(c.len());
    for w in c {
        let mut hit = None;
        for (j, rw) in r.iter().enumerate() {
            if !taken[j] && rw == w {
                taken[j] = true;
                hit = Some(j);
                break;
            }
        }
        map.push(hit);
    }
    let matched = map.iter().flatten().count();
    if matched == 0 {
        return 0.0;
    }
    // A chunk starts at every matched position that does not extend the
    // previous matched position by one on both sides.
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for (i, m) in map.iter().enumerate() {
        if let Some(j) = *m {
            let extends = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
            if !extends {
                chunks += 1;
            }
            prev = Some((i, j));
        }
    }
    let p = matched as f64 / c.len() as f64;
    let rc = matched as f64 / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (chunks as f64 / matched as f64).powi(3))
}

pub fn corpus_best(cands: &[Sent], refs: &[Vec<Sent>], f: impl Fn(&[String], &[String]) -> f64) -> f64 {
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut best = 0.0f64;
        for r in rs {
            best = best.max(f(c, r));
        }
        total += best;
    }
    total / cands.len() as f64
}

/// Twenty candidate/reference-set pairs over a small vocabulary, with
/// candidates derived from a reference by substitutions, drops and swaps so
/// that higher-order n-grams overlap.
pub fn corpus(seed: u64) -> (Vec<Sent>, Vec<Vec<Sent>>) {
    const VOCAB: [&str; 10] = ["the", "disc", "shows", "mild", "edema", "with", "drusen", "and", "fluid", "seen"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..20 {
        let n_refs = rng.random_range(1..=3);
        let set: Vec<Sent> = (0..n_refs)
            .map(|_| {
                let len = rng.random_range(3..=10);
                (0..len).map(|_| VOCAB.choose(&mut rng).unwrap().to_string()).collect()
            })
            .collect();
        let mut c = set[0].clone();
        for _ in 0..rng.random_range(0..=3) {
            let i = rng.random_range(0..c.len());
            match rng.random_range(0..3) {
                0 => c[i] = VOCAB.choose(&mut rng).unwrap().to_string(),
                1 if c.len() > 2 => {
                    c.remove(i);
                }
                _ => {
                    let j = rng.random_range(0..c.len());
                    c.swap(i, j);
                }
            }
        }
        if rng.random_bool(0.2) {
            c.push(VOCAB.choose(&mut rng).unwrap().to_string());
        }
        cands.push(c);
        refs.push(set);
    }
    (cands, refs)
}
