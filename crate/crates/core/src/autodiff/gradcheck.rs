//! Central-difference gradient checking, used as the oracle for every op's
//! backward rule.

use super::{AutodiffError, Graph, NodeId, ParamStore};
use crate::scalar::Scalar;

/// Outcome of [`grad_check`]: the largest relative error over all checked
/// parameter elements and where it occurred.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: rel err {} at {}[{}] (tolerance {tol})",
            self.max_rel_err,
            self.worst_param,
            self.worst_index
        );
    }
}

/// Compares analytic gradients against central differences
/// `(f(x + h) - f(x - h)) / 2h` for every element of every trainable
/// parameter. Relative error is `|a - n| / max(1, |a|, |n|)`.
///
/// `build` must construct the full forward pass and return the scalar root
/// each time it is called; it runs `2 * n_elements + 1` times.
pub fn grad_check<S, F>(
    store: &mut ParamStore<S>,
    mut build: F,
    h: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &mut ParamStore<S>) -> Result<NodeId, AutodiffError>,
{
    // analytic pass
    store.zero_grads();
    let mut g = Graph::new();
    let root = build(&mut g, store)?;
    g.backward(root)?;
    g.accumulate_grads(store);

    let ids = store.trainable_ids();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.grad(id).iter().map(|v| v.as_f64()).collect())
        .collect();

    let mut eval = |store: &mut ParamStore<S>| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let root = build(&mut g, store)?;
        Ok(g.scalar(root).as_f64())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        n_checked: 0,
    };
    for (pi, &id) in ids.iter().enumerate() {
        let n_elems = store.value(id).len();
        for e in 0..n_elems {
            let orig = store.value(id).as_slice().expect("standard layout")[e];
            let hs = S::lit(h);
            store.value_mut(id).as_slice_mut().expect("standard layout")[e] = orig + hs;
            let f_plus = eval(store)?;
            store.value_mut(id).as_slice_mut().expect("standard layout")[e] = orig - hs;
            let f_minus = eval(store)?;
            store.value_mut(id).as_slice_mut().expect("standard layout")[e] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi][e];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = e;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::nn::Linear;
    use crate::autodiff::KernelMap;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    const H: f64 = 1e-6;
    const TOL: f64 = 1e-5;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_relu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 5, 3);
        let mut st = ParamStore::<f64>::new();
        let w = st.register("w", rand_mat(&mut rng, 3, 4).into_dyn()).unwrap();
        let b = st
            .register("b", ndarray::Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]).into_dyn())
            .unwrap();
        let report = grad_check(
            &mut st,
            |g, st| {
                let xn = g.constant2(x.clone());
                let wn = g.param(st, w);
                let bn = g.param(st, b);
                let y = g.matmul(xn, wn)?;
                let y = g.add_bias(y, bn)?;
                let y = g.relu(y);
                Ok(g.sum_all(y))
            },
            H,
        )
        .unwrap();
        // plain linear chain: tighter tolerance applies
        report.assert_below(1e-6);
    }

    #[test]
    fn concat_gather_group_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = ParamStore::<f64>::new();
        let a = st.register("a", rand_mat(&mut rng, 4, 2).into_dyn()).unwrap();
        let b = st.register("b", rand_mat(&mut rng, 4, 3).into_dyn()).unwrap();
        let members = Rc::new(vec![vec![0usize, 2], vec![1, 3, 0], vec![]]);
        let idx = Rc::new(vec![0usize, 1, 1, 2]);
        let target = rand_mat(&mut rng, 4, 10);
        let report = grad_check(
            &mut st,
            |g, st| {
                let an = g.param(st, a);
                let bn = g.param(st, b);
                let cat = g.concat_cols(&[an, bn])?;
                let mx = g.group_max(cat, members.clone())?;
                let mn = g.group_mean(cat, members.clone())?;
                let both = g.concat_cols(&[mx, mn])?;
                let gathered = g.gather_rows(both, idx.clone())?;
                g.l1_sum(gathered, target.clone())
            },
            H,
        )
        .unwrap();
        report.assert_below(TOL);
    }

    #[test]
    fn focal_loss_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = ParamStore::<f64>::new();
        // include comfortable and extreme logits
        let mut logits = rand_mat(&mut rng, 6, 3);
        logits[[0, 0]] = 8.0;
        logits[[1, 1]] = -8.0;
        let id = st.register("logits", logits.into_dyn()).unwrap();
        let targets = Array2::from_shape_fn((6, 3), |(r, c)| if (r + c) % 3 == 0 { 1.0 } else { 0.0 });
        let report = grad_check(
            &mut st,
            |g, st| {
                let l = g.param(st, id);
                g.focal_loss(l, targets.clone(), 2.0, 0.25)
            },
            H,
        )
        .unwrap();
        report.assert_below(TOL);
    }

    #[test]
    fn arithmetic_ops_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut st = ParamStore::<f64>::new();
        let a = st.register("a", rand_mat(&mut rng, 3, 3).into_dyn()).unwrap();
        let b = st.register("b", rand_mat(&mut rng, 3, 3).into_dyn()).unwrap();
        let report = grad_check(
            &mut st,
            |g, st| {
                let an = g.param(st, a);
                let bn = g.param(st, b);
                let s = g.sub(an, bn)?;
                let m = g.mul(s, an)?;
                let m = g.mul_scalar(m, 0.7);
                let p = g.add(m, bn)?;
                Ok(g.sum_all(p))
            },
            H,
        )
        .unwrap();
        report.assert_below(TOL);
    }

    #[test]
    fn batch_norm_affine_gradients_both_modes() {
        // gamma/beta gradients under batch statistics and fixed statistics
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 6, 3);
        let batch_mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        let mut batch_var = ndarray::Array1::<f64>::zeros(x.ncols());
        for row in x.outer_iter() {
            for (c, &val) in row.iter().enumerate() {
                batch_var[c] += (val - batch_mean[c]).powi(2);
            }
        }
        batch_var.mapv_inplace(|v| v / x.nrows() as f64);
        let fixed_mean = ndarray::Array1::from_vec(vec![0.1, -0.2, 0.05]);
        let fixed_var = ndarray::Array1::from_vec(vec![1.5, 0.7, 2.0]);

        for batch_stats in [true, false] {
            let mut st = ParamStore::<f64>::new();
            let gamma = st
                .register("gamma", ndarray::Array1::from_vec(vec![1.2, 0.8, -0.5]).into_dyn())
                .unwrap();
            let beta = st
                .register("beta", ndarray::Array1::from_vec(vec![0.1, 0.0, -0.3]).into_dyn())
                .unwrap();
            let (mean, var) = if batch_stats {
                (batch_mean.clone(), batch_var.clone())
            } else {
                (fixed_mean.clone(), fixed_var.clone())
            };
            let weights = rand_mat(&mut rng, 6, 3);
            let report = grad_check(
                &mut st,
                |g, st| {
                    let xn = g.constant2(x.clone());
                    let gm = g.param(st, gamma);
                    let bt = g.param(st, beta);
                    let y = g.batch_norm(xn, gm, bt, mean.clone(), var.clone(), 1e-5, batch_stats)?;
                    let w = g.constant2(weights.clone());
                    let wy = g.mul(y, w)?;
                    Ok(g.sum_all(wy))
                },
                H,
            )
            .unwrap();
            report.assert_below(TOL);
        }
    }

    #[test]
    fn batch_norm_input_gradient_train_mode() {
        // gradient w.r.t. the *input* under batch statistics, with an
        // uneven downstream weighting so the answer is not trivially zero
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut st = ParamStore::<f64>::new();
        let xid = st.register("x", rand_mat(&mut rng, 5, 2).into_dyn()).unwrap();
        let weights = rand_mat(&mut rng, 5, 2);
        let gamma = ndarray::Array1::from_vec(vec![1.3, 0.6]);
        let beta = ndarray::Array1::from_vec(vec![-0.2, 0.4]);
        let report = grad_check(
            &mut st,
            |g, st_ref| {
                let x = g.param(st_ref, xid);
                let xv = g.value2(x).to_owned();
                let gm = g.constant(gamma.clone().into_dyn());
                let bt = g.constant(beta.clone().into_dyn());
                let m = xv.mean_axis(ndarray::Axis(0)).unwrap();
                let mut v = ndarray::Array1::<f64>::zeros(xv.ncols());
                for row in xv.outer_iter() {
                    for (c, &val) in row.iter().enumerate() {
                        v[c] += (val - m[c]).powi(2);
                    }
                }
                v.mapv_inplace(|val| val / xv.nrows() as f64);
                let y = g.batch_norm(x, gm, bt, m, v, 1e-5, true)?;
                let w = g.constant2(weights.clone());
                let wy = g.mul(y, w)?;
                Ok(g.sum_all(wy))
            },
            H,
        )
        .unwrap();
        report.assert_below(TOL);
    }

    #[test]
    fn sparse_conv_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n_in = 6;
        let n_out = 4;
        let k = 3;
        let (c_in, c_out) = (2, 3);
        let mut pairs = vec![Vec::new(); k];
        for slot in 0..k {
            for _ in 0..4 {
                pairs[slot].push((rng.gen_range(0..n_in), rng.gen_range(0..n_out)));
            }
        }
        let kmap = Rc::new(KernelMap { n_out, pairs });
        let mut st = ParamStore::<f64>::new();
        let x = st.register("x", rand_mat(&mut rng, n_in, c_in).into_dyn()).unwrap();
        let w = st
            .register(
                "w",
                Array3::from_shape_fn((k, c_in, c_out), |_| rng.gen_range(-1.0..1.0)).into_dyn(),
            )
            .unwrap();
        let target = rand_mat(&mut rng, n_out, c_out);
        let report = grad_check(
            &mut st,
            |g, st| {
                let xn = g.param(st, x);
                let wn = g.param(st, w);
                let y = g.sparse_conv(xn, wn, kmap.clone())?;
                g.l1_sum(y, target.clone())
            },
            H,
        )
        .unwrap();
        report.assert_below(TOL);
    }

    #[test]
    fn two_layer_net_with_both_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_mat(&mut rng, 6, 4);
        let mut st = ParamStore::<f64>::new();
        let l0 = Linear::new(&mut st, &mut rng, "l0", 4, 8).unwrap();
        let l1 = Linear::new(&mut st, &mut rng, "l1", 8, 3).unwrap();
        let targets = Array2::from_shape_fn((6, 3), |(r, _)| if r % 2 == 0 { 1.0 } else { 0.0 });
        let reg_target = rand_mat(&mut rng, 6, 3);
        let report = grad_check(
            &mut st,
            |g, st| {
                let xn = g.constant2(x.clone());
                let h = l0.forward(g, st, xn)?;
                let h = g.relu(h);
                let o = l1.forward(g, st, h)?;
                let cls = g.focal_loss(o, targets.clone(), 2.0, 0.25)?;
                let reg = g.l1_sum(o, reg_target.clone())?;
                let reg = g.mul_scalar(reg, 1.0 / 6.0);
                g.add(cls, reg)
            },
            H,
        )
        .unwrap();
        report.assert_below(TOL);
    }
}
