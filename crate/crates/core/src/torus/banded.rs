//! Cyclic banded matrices and their direct solution.
//!
//! The band part is factored by LU with partial pivoting; the periodic wrap
//! corners and any extra rank-one terms are folded in with the
//! Sherman–Morrison–Woodbury identity.

use nalgebra::DMatrix;

use super::TorusError;

/// `A(i, (i + k) mod n)` for `|k| ≤ p`.
#[derive(Debug, Clone)]
pub struct CyclicBanded {
    n: usize,
    p: usize,
    a: Vec<f64>,
}

impl CyclicBanded {
    pub fn zeros(n: usize, p: usize) -> Self {
        assert!(n >= 4 * p.max(1), "cyclic band too wide for n={n}, p={p}");
        CyclicBanded {
            n,
            p,
            a: vec![0.0; n * (2 * p + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_width(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn get(&self, i: usize, k: isize) -> f64 {
        self.a[i * (2 * self.p + 1) + (k + self.p as isize) as usize]
    }

    #[inline]
    pub fn add(&mut self, i: usize, k: isize, v: f64) {
        self.a[i * (2 * self.p + 1) + (k + self.p as isize) as usize] += v;
    }

    fn col(&self, i: usize, k: isize) -> usize {
        (i as isize + k).rem_euclid(self.n as isize) as usize
    }

    pub fn apply(&self, f: &[f64], out: &mut [f64]) {
        let p = self.p as isize;
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in -p..=p {
                s += self.get(i, k) * f[self.col(i, k)];
            }
            *o = s;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = CyclicBanded::zeros(self.n, self.p);
        let p = self.p as isize;
        for i in 0..self.n {
            for k in -p..=p {
                let j = self.col(i, k);
                t.add(j, -k, self.get(i, k));
            }
        }
        t
    }

    pub fn add_diagonal(&mut self, shift: f64) {
        for i in 0..self.n {
            self.add(i, 0, shift);
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.a
            .chunks(2 * self.p + 1)
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let p = self.p as isize;
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in -p..=p {
                m[(i, self.col(i, k))] += self.get(i, k);
            }
        }
        m
    }

    /// Factor `A + Σ u_r v_rᵀ` for the given dense rank-one terms.
    pub fn factor(&self, extra: &[(Vec<f64>, Vec<f64>)]) -> Result<CyclicLu, TorusError> {
        let (n, p) = (self.n, self.p);
        let band = BandLu::factor(self)?;
        // Wrap corners as rank-one terms e_r w_rᵀ.
        let mut us: Vec<Vec<f64>> = Vec::new();
        let mut vs: Vec<Vec<f64>> = Vec::new();
        let pi = p as isize;
        for i in (0..p).chain(n - p..n) {
            let mut v = vec![0.0; n];
            let mut any = false;
            for k in -pi..=pi {
                let j = i as isize + k;
                if j < 0 || j >= n as isize {
                    let w = self.get(i, k);
                    if w != 0.0 {
                        v[self.col(i, k)] += w;
                        any = true;
                    }
                }
            }
            if any {
                let mut u = vec![0.0; n];
                u[i] = 1.0;
                us.push(u);
                vs.push(v);
            }
        }
        for (u, v) in extra {
            assert!(u.len() == n && v.len() == n);
            us.push(u.clone());
            vs.push(v.clone());
        }
        let m = us.len();
        let z: Vec<Vec<f64>> = us.iter().map(|u| band.solve(u)).collect();
        let cap = DMatrix::from_fn(m, m, |r, c| {
            let dot: f64 = vs[r].iter().zip(&z[c]).map(|(a, b)| a * b).sum();
            if r == c {
                1.0 + dot
            } else {
                dot
            }
        });
        let cap_lu = cap.lu();
        if m > 0 && !cap_lu.is_invertible() {
            return Err(TorusError::Singular);
        }
        Ok(CyclicLu {
            band,
            z,
            vs,
            cap: cap_lu,
        })
    }
}

/// LU of the non-wrapping band part, pivoted within the band.
#[derive(Debug, Clone)]
struct BandLu {
    n: usize,
    p: usize,
    /// Row `i` stores columns `i - p ..= i + 2p`.
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    #[inline]
    fn w(&self) -> usize {
        3 * self.p + 1
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.w() + (j + self.p - i)
    }

    fn factor(m: &CyclicBanded) -> Result<Self, TorusError> {
        let (n, p) = (m.n, m.p);
        let mut lu = BandLu {
            n,
            p,
            a: vec![0.0; n * (3 * p + 1)],
            piv: vec![0; n],
        };
        for i in 0..n {
            for k in -(p as isize)..=(p as isize) {
                let j = i as isize + k;
                if j >= 0 && j < n as isize {
                    let at = lu.idx(i, j as usize);
                    lu.a[at] = m.get(i, k);
                }
            }
        }
        for k in 0..n {
            let last = (k + p).min(n - 1);
            let mut best = k;
            let mut best_v = lu.a[lu.idx(k, k)].abs();
            for r in k + 1..=last {
                let v = lu.a[lu.idx(r, k)].abs();
                if v > best_v {
                    best = r;
                    best_v = v;
                }
            }
            if best_v == 0.0 || !best_v.is_finite() {
                return Err(TorusError::Singular);
            }
            lu.piv[k] = best;
            let right = (k + 2 * p).min(n - 1);
            if best != k {
                for j in k..=right {
                    let (ia, ib) = (lu.idx(k, j), lu.idx(best, j));
                    lu.a.swap(ia, ib);
                }
            }
            let pivot = lu.a[lu.idx(k, k)];
            for r in k + 1..=last {
                let ir = lu.idx(r, k);
                let l = lu.a[ir] / pivot;
                lu.a[ir] = l;
                if l != 0.0 {
                    for j in k + 1..=right {
                        let src = lu.a[lu.idx(k, j)];
                        let dst = lu.idx(r, j);
                        lu.a[dst] -= l * src;
                    }
                }
            }
        }
        Ok(lu)
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, p) = (self.n, self.p);
        let mut b = rhs.to_vec();
        for k in 0..n {
            b.swap(k, self.piv[k]);
            let bk = b[k];
            if bk != 0.0 {
                for r in k + 1..=(k + p).min(n - 1) {
                    b[r] -= self.a[self.idx(r, k)] * bk;
                }
            }
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..=(i + 2 * p).min(n - 1) {
                s -= self.a[self.idx(i, j)] * b[j];
            }
            b[i] = s / self.a[self.idx(i, i)];
        }
        b
    }
}

#[derive(Debug, Clone)]
pub struct CyclicLu {
    band: BandLu,
    z: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    cap: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl CyclicLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut y = self.band.solve(rhs);
        if self.z.is_empty() {
            return y;
        }
        let t = nalgebra::DVector::from_iterator(
            self.vs.len(),
            self.vs
                .iter()
                .map(|v| v.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>()),
        );
        let s = self.cap.solve(&t).expect("capacitance matrix checked invertible");
        for (zc, sc) in self.z.iter().zip(s.iter()) {
            for (yi, zi) in y.iter_mut().zip(zc) {
                *yi -= sc * zi;
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_band(n: usize, p: usize, seed: u64) -> CyclicBanded {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = CyclicBanded::zeros(n, p);
        for i in 0..n {
            for k in -(p as isize)..=(p as isize) {
                m.add(i, k, rng.gen_range(-1.0..1.0));
            }
            m.add(i, 0, 0.5);
        }
        m
    }

    fn check_against_dense(m: &CyclicBanded, extra: &[(Vec<f64>, Vec<f64>)], rhs: &[f64]) {
        let mut dense = m.to_dense();
        for (u, v) in extra {
            for i in 0..m.n() {
                for j in 0..m.n() {
                    dense[(i, j)] += u[i] * v[j];
                }
            }
        }
        let want = dense
            .clone()
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(rhs))
            .unwrap();
        let got = m.factor(extra).unwrap().solve(rhs);
        let scale = want.amax().max(1.0);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-9 * scale, "{g} vs {w}");
        }
    }

    #[test]
    fn matches_dense_lu_for_all_widths() {
        for p in 1..=4 {
            let m = random_band(24, p, p as u64);
            let rhs: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
            check_against_dense(&m, &[], &rhs);
            let u: Vec<f64> = (0..24).map(|_| 1.0).collect();
            let v: Vec<f64> = (0..24).map(|i| 1.0 + 0.1 * i as f64).collect();
            check_against_dense(&m, &[(u, v)], &rhs);
        }
    }

    #[test]
    fn transpose_matches_dense_transpose() {
        let m = random_band(16, 2, 9);
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
    }

    #[test]
    fn singular_band_is_reported() {
        let m = CyclicBanded::zeros(8, 1);
        assert!(matches!(m.factor(&[]), Err(TorusError::Singular)));
    }

    proptest! {
        #[test]
        fn solves_random_systems(seed in 0u64..1000, p in 1usize..=3) {
            let n = 32;
            let m = random_band(n, p, seed);
            let rhs: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64).cos()).collect();
            let x = m.factor(&[]).unwrap().solve(&rhs);
            let mut r = vec![0.0; n];
            m.apply(&x, &mut r);
            let cond_guard = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            for (ri, bi) in r.iter().zip(&rhs) {
                prop_assert!((ri - bi).abs() <= 1e-10 * cond_guard);
            }
        }
    }
}
