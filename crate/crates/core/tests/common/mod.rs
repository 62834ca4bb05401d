//! Helpers shared by the integration tests and the acceptance binary.
#![allow(dead_code)]

use nvrm::data::Dataset;
use nvrm::optim::{Adam, AdamConfig, NoiseFamily, NoiseSpec, Nvrm, Optimizer, Sgd, SgdConfig};
use nvrm::tensor::{Gradients, ParameterSet, Tensor};
use nvrm::train::rng_for;
use nvrm::Real;

/// Smooth non-convex test loss: `Σ ln cosh(aᵢ wᵢ) + ½ cᵢ wᵢ² + sin(wᵢ)/4`.
pub struct ToyLoss {
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl ToyLoss {
    pub fn new(shapes: &[Vec<usize>], seed: u64) -> Self {
        let mut rng = rng_for(seed, 100);
        let draw = |rng: &mut _, lo: f64, hi: f64, n: usize| -> Vec<f64> {
            (0..n).map(|_| lo + (hi - lo) * rand::Rng::random::<f64>(rng)).collect()
        };
        let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
        ToyLoss {
            a: sizes.iter().map(|&n| draw(&mut rng, 0.5, 2.0, n)).collect(),
            c: sizes.iter().map(|&n| draw(&mut rng, 0.1, 1.0, n)).collect(),
        }
    }

    pub fn grad_at(&self, i: usize, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.a[i])
            .zip(&self.c[i])
            .map(|((&w, &a), &c)| a * (a * w).tanh() + c * w + 0.25 * w.cos())
            .collect()
    }

    pub fn grads(&self, params: &ParameterSet<f64>) -> Gradients<f64> {
        Gradients::from_tensors(
            params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| Tensor::new(t.shape().to_vec(), self.grad_at(i, t.data())).unwrap())
                .collect(),
        )
    }
}

pub fn toy_params(seed: u64) -> ParameterSet<f64> {
    let mut rng = rng_for(seed, 101);
    let mut p = ParameterSet::new();
    let w: Vec<f64> = (0..12).map(|_| f64::standard_normal(&mut rng)).collect();
    let b: Vec<f64> = (0..4).map(|_| f64::standard_normal(&mut rng)).collect();
    p.push("w", Tensor::matrix(3, 4, w).unwrap().with_requires_grad(true)).unwrap();
    p.push("b", Tensor::vector(&b).with_requires_grad(true)).unwrap();
    p
}

/// Textbook heavy-ball SGD with coupled L2, on flat vectors.
pub struct RefSgd {
    pub lr: f64,
    pub momentum: f64,
    pub wd: f64,
    v: Vec<Vec<f64>>,
}

/// Textbook Adam with coupled L2, on flat vectors.
pub struct RefAdam {
    pub lr: f64,
    pub wd: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

pub enum RefOpt {
    Sgd(RefSgd),
    Adam(RefAdam),
}

impl RefOpt {
    pub fn sgd(lr: f64, momentum: f64, wd: f64, sizes: &[usize]) -> Self {
        RefOpt::Sgd(RefSgd {
            lr,
            momentum,
            wd,
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn adam(lr: f64, wd: f64, sizes: &[usize]) -> Self {
        RefOpt::Adam(RefAdam {
            lr,
            wd,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        })
    }

    /// The step `Δ` such that the update is `w ← w − Δ`, for gradients and
    /// decay both taken at `at`.
    pub fn deltas(&mut self, grads: &[Vec<f64>], at: &[Vec<f64>]) -> Vec<Vec<f64>> {
        match self {
            RefOpt::Sgd(s) => grads
                .iter()
                .zip(at)
                .zip(s.v.iter_mut())
                .map(|((g, w), v)| {
                    (0..g.len())
                        .map(|j| {
                            v[j] = s.momentum * v[j] + g[j] + s.wd * w[j];
                            s.lr * v[j]
                        })
                        .collect()
                })
                .collect(),
            RefOpt::Adam(a) => {
                a.t += 1;
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                let (c1, c2) = (1.0 - b1.powi(a.t), 1.0 - b2.powi(a.t));
                grads
                    .iter()
                    .zip(at)
                    .zip(a.m.iter_mut().zip(a.v.iter_mut()))
                    .map(|((g, w), (m, v))| {
                        (0..g.len())
                            .map(|j| {
                                let gj = g[j] + a.wd * w[j];
                                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                                a.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps)
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Inner {
    Sgd,
    Adam,
}

/// Largest deviation, over `steps` steps, between the library's NVRM
/// bookkeeping and two independent forms of the same iteration:
///
/// * direct form: `φₜ₊₁ = φₜ − Δ(∇L(φₜ + εₜ))`, stored weights `φₜ + εₜ`;
/// * single-buffer form: `θₜ₊₁ = θₜ − Δ(∇L(θₜ)) − εₜ + εₜ₊₁`.
///
/// All three consume the same noise stream.
pub fn nvrm_oracle_gap(inner: Inner, steps: usize, seed: u64, b: f64) -> f64 {
    let mut params = toy_params(seed);
    let loss = ToyLoss::new(&params.shapes(), seed);
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let noise = NoiseSpec::gaussian(b);
    let rng = rng_for(seed, 7);
    let (lr_sgd, lr_adam, wd) = (0.05, 0.01, 1e-3);

    let mut direct = match inner {
        Inner::Sgd => RefOpt::sgd(lr_sgd, 0.9, wd, &sizes),
        Inner::Adam => RefOpt::adam(lr_adam, wd, &sizes),
    };
    let mut single = match inner {
        Inner::Sgd => RefOpt::sgd(lr_sgd, 0.9, wd, &sizes),
        Inner::Adam => RefOpt::adam(lr_adam, wd, &sizes),
    };
    let mut oracle_rng = rng.clone();
    let mut phi: Vec<Vec<f64>> = params.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut theta = phi.clone();
    let mut eps: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();

    enum Lib {
        Sgd(Nvrm<f64, Sgd<f64>>),
        Adam(Nvrm<f64, Adam<f64>>),
    }
    let mut lib = match inner {
        Inner::Sgd => Lib::Sgd(
            Nvrm::with_rng(Sgd::new(SgdConfig::new(lr_sgd).momentum(0.9).weight_decay(wd)).unwrap(), noise, rng)
                .unwrap(),
        ),
        Inner::Adam => Lib::Adam(
            Nvrm::with_rng(Adam::new(AdamConfig::new(lr_adam).weight_decay(wd)).unwrap(), noise, rng).unwrap(),
        ),
    };
    match &mut lib {
        Lib::Sgd(o) => o.attach(&params).unwrap(),
        Lib::Adam(o) => o.attach(&params).unwrap(),
    }

    let mut worst = 0.0f64;
    for _ in 0..steps {
        let g = loss.grads(&params);
        match &mut lib {
            Lib::Sgd(o) => o.step(&mut params, &g).unwrap(),
            Lib::Adam(o) => o.step(&mut params, &g).unwrap(),
        }

        let at: Vec<Vec<f64>> = phi.iter().zip(&eps).map(|(p, e)| p.iter().zip(e).map(|(a, b)| a + b).collect()).collect();
        let g_direct: Vec<Vec<f64>> = at.iter().enumerate().map(|(i, w)| loss.grad_at(i, w)).collect();
        let d = direct.deltas(&g_direct, &at);
        let g_single: Vec<Vec<f64>> = theta.iter().enumerate().map(|(i, w)| loss.grad_at(i, w)).collect();
        let d_single = single.deltas(&g_single, &theta.clone());

        let mut fresh: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        for e in fresh.iter_mut() {
            noise.fill(e, &mut oracle_rng);
        }
        for i in 0..sizes.len() {
            for j in 0..sizes[i] {
                phi[i][j] -= d[i][j];
                theta[i][j] = theta[i][j] - d_single[i][j] - eps[i][j] + fresh[i][j];
            }
        }
        eps = fresh;

        for i in 0..sizes.len() {
            let stored = params.tensor(i).data();
            let clean = match &lib {
                Lib::Sgd(o) => o.clean_weights(i),
                Lib::Adam(o) => o.clean_weights(i),
            };
            let lib_eps = match &lib {
                Lib::Sgd(o) => o.perturbation(i),
                Lib::Adam(o) => o.perturbation(i),
            };
            for j in 0..sizes[i] {
                worst = worst
                    .max((clean[j] - phi[i][j]).abs())
                    .max(((stored[j] - lib_eps[j]) - phi[i][j]).abs())
                    .max(((theta[i][j] - eps[i][j]) - phi[i][j]).abs())
                    .max((stored[j] - theta[i][j]).abs());
            }
        }
    }
    worst
}

/// Gaussian clusters in `dim` dimensions, one well-separated centre per class.
pub fn clusters(n: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Dataset<f64> {
    let mut rng = rng_for(seed, 102);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| 2.0 * f64::standard_normal(&mut rng)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        data.extend(centres[y].iter().map(|c| c + spread * f64::standard_normal(&mut rng)));
        labels.push(y);
    }
    Dataset::new(Tensor::matrix(n, dim, data).unwrap(), labels, classes).unwrap()
}

/// Runs `steps` NVRM steps at learning rate zero, then finalizes; true when
/// the weights come back bit-identical.
pub fn lr_zero_round_trip(family: NoiseFamily, b: f64, steps: usize, seed: u64, adam: bool) -> bool {
    let initial = toy_params(seed);
    let loss = ToyLoss::new(&initial.shapes(), seed);
    let mut p = initial.clone();
    let noise = NoiseSpec::new(family, b);
    macro_rules! drive {
        ($opt:expr) => {{
            let mut opt = $opt;
            opt.attach(&p).unwrap();
            for _ in 0..steps {
                let g = loss.grads(&p);
                opt.step(&mut p, &g).unwrap();
            }
            opt.finalize(&mut p).unwrap();
        }};
    }
    if adam {
        drive!(Nvrm::new(Adam::new(AdamConfig::new(0.0).weight_decay(1e-2)).unwrap(), noise, seed).unwrap());
    } else {
        drive!(Nvrm::new(Sgd::new(SgdConfig::new(0.0).momentum(0.9)).unwrap(), noise, seed).unwrap());
    }
    p.bit_identical(&initial)
}

#[test]
fn thousand_zero_lr_steps_then_finalize_is_the_identity() {
    assert!(lr_zero_round_trip(NoiseFamily::Gaussian, 0.05, 1000, 1, false));
    assert!(lr_zero_round_trip(NoiseFamily::Gaussian, 0.05, 1000, 1, true));
}

/// NVRM with `b = 0` against its bare inner optimizer, compared bitwise.
pub fn zero_noise_matches_inner(steps: usize, seed: u64, adam: bool) -> bool {
    let loss = ToyLoss::new(&toy_params(seed).shapes(), seed);
    let mut plain = toy_params(seed);
    let mut wrapped = toy_params(seed);
    macro_rules! drive {
        ($inner:expr) => {{
            let mut a = $inner;
            let mut n = Nvrm::new($inner, NoiseSpec::none(), seed).unwrap();
            n.attach(&wrapped).unwrap();
            for _ in 0..steps {
                let g = loss.grads(&plain);
                a.step(&mut plain, &g).unwrap();
                let g = loss.grads(&wrapped);
                n.step(&mut wrapped, &g).unwrap();
            }
            n.finalize(&mut wrapped).unwrap();
        }};
    }
    if adam {
        drive!(Adam::new(AdamConfig::new(0.01).weight_decay(1e-3)).unwrap());
    } else {
        drive!(Sgd::new(SgdConfig::new(0.05).momentum(0.9).weight_decay(1e-3)).unwrap());
    }
    plain.bit_identical(&wrapped)
}
