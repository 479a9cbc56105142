use std::collections::BTreeMap;

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| &a[i])
            .collect();
        let mut it = b.iter();
        if sub.iter().all(|w| it.any(|x| x == *w)) {
            best = best.max(sub.len());
        }
    }
    best
}

/// Independent tf-idf CIDEr over space-joined n-gram strings.
pub fn cider_oracle(hyps: &[&str], refs: &[&str]) -> f64 {
    fn grams(s: &str, n: usize) -> BTreeMap<String, f64> {
        let w: Vec<&str> = s.split(' ').filter(|x| !x.is_empty()).collect();
        let mut m = BTreeMap::new();
        for i in 0..(w.len() + 1).saturating_sub(n) {
            *m.entry(w[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
        m
    }
    let n_docs = refs.len() as f64;
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let mut s = 0.0;
        for n in 1..=4 {
            let df = |g: &str| {
                refs.iter()
                    .filter(|x| grams(x, n).contains_key(g))
                    .count()
                    .max(1) as f64
            };
            let weigh = |m: BTreeMap<String, f64>| -> BTreeMap<String, f64> {
                m.into_iter()
                    .map(|(g, c)| {
                        let w = c * (n_docs / df(&g)).ln();
                        (g, w)
                    })
                    .collect()
            };
            let hv = weigh(grams(h, n));
            let rv = weigh(grams(r, n));
            let norm = |m: &BTreeMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = hv.iter().map(|(g, v)| v * rv.get(g).unwrap_or(&0.0)).sum();
            if norm(&hv) > 0.0 && norm(&rv) > 0.0 {
                s += dot / (norm(&hv) * norm(&rv));
            }
        }
        total += s / 4.0;
    }
    total / hyps.len() as f64
}
