use lfbnet::metrics::{BinaryMask, Topology};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| r.gen_bool(density)).collect()).unwrap()
}

/// Blobby mask: random rectangles unioned together.
pub fn blob_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut data = vec![false; h * w];
    for _ in 0..r.gen_range(1..4) {
        let (y0, x0) = (r.gen_range(0..h), r.gen_range(0..w));
        let (y1, x1) = (r.gen_range(y0..h), r.gen_range(x0..w));
        for y in y0..=y1 {
            for x in x0..=x1 {
                data[y * w + x] = true;
            }
        }
    }
    BinaryMask::new(h, w, data).unwrap()
}

pub fn oracle_boundary(m: &BinaryMask) -> Vec<(f64, f64)> {
    let [_, h, w] = m.dims();
    let on = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.get(0, y as usize, x as usize);
    let mut pts = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !on(y + dy, x + dx)) {
                let s = m.spacing();
                pts.push((y as f64 * s[1], x as f64 * s[2]));
            }
        }
    }
    pts
}

pub fn oracle_hausdorff(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    let pa = oracle_boundary(a);
    let pb = oracle_boundary(b);
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| {
        p.iter()
            .map(|a| q.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)))
}

/// Union-find component counts for 4-connectivity.
pub fn oracle_topology(m: &BinaryMask) -> Topology {
    let [_, h, w] = m.dims();
    fn find(p: &mut Vec<usize>, i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut i = i;
        while p[i] != r {
            let next = p[i];
            p[i] = r;
            i = next;
        }
        r
    }
    let count = |value: bool| {
        let mut parent: Vec<usize> = (0..h * w).collect();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if m.get(0, y, x) != value {
                    continue;
                }
                if x + 1 < w && m.get(0, y, x + 1) == value {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, i + 1));
                    parent[a] = b;
                }
                if y + 1 < h && m.get(0, y + 1, x) == value {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, i + w));
                    parent[a] = b;
                }
            }
        }
        let mut roots = std::collections::BTreeMap::new();
        for y in 0..h {
            for x in 0..w {
                if m.get(0, y, x) == value {
                    let r = find(&mut parent, y * w + x);
                    let border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                    *roots.entry(r).or_insert(false) |= border;
                }
            }
        }
        roots
    };
    Topology {
        components: count(true).len(),
        holes: count(false).values().filter(|&&b| !b).count(),
    }
}

/// Two-sided p from all 2^n sign assignments of the given ranks.
pub fn enumerate_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len();
    let mut lower = 0u64;
    let mut upper = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
        if s <= w_plus + 1e-9 {
            lower += 1;
        }
        if s >= w_plus - 1e-9 {
            upper += 1;
        }
    }
    (2.0 * lower.min(upper) as f64 / (1u64 << n) as f64).min(1.0)
}
