//! Central finite-difference weights on a uniform periodic grid.

/// Supported accuracy orders of the central stencils.
pub const ORDERS: [usize; 4] = [2, 4, 6, 8];

/// Weights for offsets `-p..=p` of the first derivative (multiply by `1/h`).
pub fn first(order: usize) -> &'static [f64] {
    match order {
        2 => &[-0.5, 0.0, 0.5],
        4 => &[1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0],
        6 => &[-1.0 / 60.0, 3.0 / 20.0, -0.75, 0.0, 0.75, -3.0 / 20.0, 1.0 / 60.0],
        8 => &[
            1.0 / 280.0,
            -4.0 / 105.0,
            0.2,
            -0.8,
            0.0,
            0.8,
            -0.2,
            4.0 / 105.0,
            -1.0 / 280.0,
        ],
        _ => panic!("unsupported stencil order {order}"),
    }
}

/// Weights for offsets `-p..=p` of the second derivative (multiply by `1/h²`).
pub fn second(order: usize) -> &'static [f64] {
    match order {
        2 => &[1.0, -2.0, 1.0],
        4 => &[-1.0 / 12.0, 4.0 / 3.0, -2.5, 4.0 / 3.0, -1.0 / 12.0],
        6 => &[1.0 / 90.0, -3.0 / 20.0, 1.5, -49.0 / 18.0, 1.5, -3.0 / 20.0, 1.0 / 90.0],
        8 => &[
            -1.0 / 560.0,
            8.0 / 315.0,
            -0.2,
            1.6,
            -205.0 / 72.0,
            1.6,
            -0.2,
            8.0 / 315.0,
            -1.0 / 560.0,
        ],
        _ => panic!("unsupported stencil order {order}"),
    }
}

pub fn half_width(order: usize) -> usize {
    order / 2
}

/// Apply a stencil along a periodic 1-D array.
pub fn apply_periodic(w: &[f64], f: &[f64], scale: f64, out: &mut [f64]) {
    let n = f.len();
    let p = w.len() / 2;
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (k, wk) in w.iter().enumerate() {
            if *wk != 0.0 {
                s += wk * f[(i + n + k - p) % n];
            }
        }
        *o = s * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exactness on monomials up to the design order, from Taylor moments.
    #[test]
    fn stencils_have_their_nominal_order() {
        for order in ORDERS {
            let p = half_width(order) as i32;
            for (w, deriv) in [(first(order), 1i32), (second(order), 2i32)] {
                for m in 0..=order as i32 + deriv {
                    let moment: f64 = (-p..=p).zip(w).map(|(k, wk)| wk * (k as f64).powi(m)).sum();
                    let expect = if m == deriv {
                        (1..=deriv).product::<i32>() as f64
                    } else if m < order as i32 + deriv {
                        0.0
                    } else {
                        continue;
                    };
                    assert!(
                        (moment - expect).abs() < 1e-12,
                        "order {order} deriv {deriv} moment {m}: {moment}"
                    );
                }
            }
        }
    }

    #[test]
    fn weights_sum_to_zero() {
        for order in ORDERS {
            assert!(first(order).iter().sum::<f64>().abs() < 1e-15);
            assert!(second(order).iter().sum::<f64>().abs() < 1e-14);
        }
    }
}
