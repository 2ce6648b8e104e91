//! Small neural-net building blocks on top of the graph: linear layers,
//! batch normalization and point-wise MLPs.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2};
use rand::Rng;

use super::{AutodiffError, Graph, NodeId, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Standard-normal sample via Box-Muller (keeps the dependency surface to
/// plain `rand`).
fn normal<S: Scalar, R: Rng>(rng: &mut R) -> S {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    S::lit((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
}

/// Kaiming-normal weight matrix for ReLU nets: std `sqrt(2 / fan_in)`.
pub fn kaiming_normal<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<S> {
    let std = S::lit((2.0 / fan_in.max(1) as f64).sqrt());
    Array2::from_shape_fn((fan_in, fan_out), |_| normal::<S, _>(rng) * std)
}

/// Whether a forward pass updates batch statistics (training) or uses the
/// stored running statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `y = x W + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self, AutodiffError> {
        let w = store.register(
            &format!("{name}.w"),
            kaiming_normal::<S, _>(rng, in_dim, out_dim).into_dyn(),
        )?;
        let b = store.register(&format!("{name}.b"), ArrayD::zeros(vec![out_dim]))?;
        Ok(Self { w, b })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Per-column batch normalization with running statistics stored as
/// non-trainable buffers (so they ride along in checkpoints).
///
/// Training normalizes with biased batch variance and updates the running
/// statistics with momentum (`running = (1 - m) * running + m * batch`,
/// unbiased variance in the running estimate); inference normalizes with
/// the stored statistics.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
    ) -> Result<Self, AutodiffError> {
        let gamma = store.register(&format!("{name}.gamma"), ArrayD::ones(vec![dim]))?;
        let beta = store.register(&format!("{name}.beta"), ArrayD::zeros(vec![dim]))?;
        let running_mean =
            store.register_buffer(&format!("{name}.running_mean"), ArrayD::zeros(vec![dim]))?;
        let running_var =
            store.register_buffer(&format!("{name}.running_var"), ArrayD::ones(vec![dim]))?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &mut ParamStore<S>,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId, AutodiffError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let xv = g
            .value(x)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("batch_norm input must be 2-d");
        let n = xv.nrows();
        let (mean, var, batch_stats) = match mode {
            Mode::Train if n > 0 => {
                let mean = xv.mean_axis(Axis(0)).expect("n > 0");
                let mut var = Array1::<S>::zeros(xv.ncols());
                for row in xv.outer_iter() {
                    for (c, &v) in row.iter().enumerate() {
                        let d = v - mean[c];
                        var[c] += d * d;
                    }
                }
                var.mapv_inplace(|v| v / S::from_usize(n).unwrap());
                self.update_running(store, &mean, &var, n);
                (mean, var, true)
            }
            _ => {
                let to1 = |a: &ArrayD<S>| {
                    a.view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .expect("running stats are 1-d")
                        .to_owned()
                };
                (
                    to1(store.value(self.running_mean)),
                    to1(store.value(self.running_var)),
                    false,
                )
            }
        };
        g.batch_norm(x, gamma, beta, mean, var, S::lit(self.eps), batch_stats)
    }

    fn update_running<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        mean: &Array1<S>,
        var: &Array1<S>,
        n: usize,
    ) {
        let m = S::lit(self.momentum);
        let keep = S::one() - m;
        // unbiased variance for the running estimate; skip when n == 1
        let unbias = if n > 1 {
            S::from_usize(n).unwrap() / S::from_usize(n - 1).unwrap()
        } else {
            return;
        };
        {
            let rm = store.value_mut(self.running_mean);
            for (r, &b) in rm.iter_mut().zip(mean.iter()) {
                *r = keep * *r + m * b;
            }
        }
        let rv = store.value_mut(self.running_var);
        for (r, &b) in rv.iter_mut().zip(var.iter()) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Point-wise MLP: linear layers with ReLU between them and optional batch
/// norm after each linear. `final_relu` controls whether the last layer is
/// also activated (feature extractors) or left linear (prediction heads).
pub struct Mlp {
    layers: Vec<Linear>,
    norms: Vec<Option<BatchNorm>>,
    final_relu: bool,
}

impl Mlp {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dims: &[usize],
        batch_norm: bool,
        final_relu: bool,
    ) -> Result<Self, AutodiffError> {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for i in 0..dims.len() - 1 {
            layers.push(Linear::new(
                store,
                rng,
                &format!("{name}.{i}"),
                dims[i],
                dims[i + 1],
            )?);
            let is_last = i == dims.len() - 2;
            let activated = !is_last || final_relu;
            norms.push(if batch_norm && activated {
                Some(BatchNorm::new(store, &format!("{name}.{i}.bn"), dims[i + 1])?)
            } else {
                None
            });
        }
        Ok(Self {
            layers,
            norms,
            final_relu,
        })
    }

    pub fn out_dim_of(dims: &[usize]) -> usize {
        *dims.last().expect("non-empty dims")
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &mut ParamStore<S>,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId, AutodiffError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if let Some(bn) = &self.norms[i] {
                h = bn.forward(g, store, h, mode)?;
            }
            if i < last || self.final_relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}
