//! Central-difference validation of the reverse-mode gradients. The
//! analytic pass runs the ordinary f32 engine; the difference quotients
//! re-run the identical forward in f64, because f32 function values carry
//! rounding of order 1e-7 that a 1e-3 relative bound cannot absorb once
//! losses sit near saturation.
//!
//! Inputs are registered as parameters too, so every check covers both
//! d(loss)/d(weights) and d(loss)/d(input).

use rand::Rng;

use crate::blocks::{ChannelAttention, Conv2dLayer, ConvGate, LinearLayer, MafaBlock, MfbBlock, UmfebBlock};
use crate::config::Config;
use crate::data;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::total_loss;
use crate::model::SplfModel;
use crate::rng;
use crate::scalar::Scalar;
use crate::spectral::{spectral_branch, FrequencyKernel};
use crate::tensor::{Init, Param, Tensor};

/// Finite-difference step, applied symmetrically in the f32 parameter
/// storage. The quotient divides by the actually representable difference,
/// not by 2*eps.
pub const FD_EPS: f64 = 1e-3;

/// A component passes when every checked coordinate's relative error stays
/// below this.
pub const REL_THRESHOLD: f64 = 1e-3;

/// Setting this variable to `*` or to a substring of a component name adds
/// 1.0 to one analytic gradient entry of that component, which must make
/// the check fail. Exists so the test harness can prove the checker is not
/// vacuously green.
pub const CORRUPT_ENV: &str = "SPLF_GRADCHECK_CORRUPT";

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub component: String,
    pub max_rel: f64,
    pub coords: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel < REL_THRESHOLD
    }
}

/// Which coordinates get a difference quotient.
pub enum SamplePlan {
    /// Every coordinate of every parameter.
    All,
    /// Up to this many random coordinates per parameter.
    PerParam(usize),
    /// This many coordinates sampled from the flattened space of all
    /// parameters, for components too large to cover per-parameter.
    Global(usize),
}

fn corruption_requested(component: &str) -> bool {
    match std::env::var(CORRUPT_ENV) {
        Ok(pat) => pat == "*" || (!pat.is_empty() && component.contains(&pat)),
        Err(_) => false,
    }
}

fn pick_coords(params: &[Param], plan: &SamplePlan, seed: u64) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    match plan {
        SamplePlan::All => {
            for (pi, p) in params.iter().enumerate() {
                coords.extend((0..p.numel()).map(|i| (pi, i)));
            }
        }
        SamplePlan::PerParam(k) => {
            for (pi, p) in params.iter().enumerate() {
                let n = p.numel();
                if n <= *k {
                    coords.extend((0..n).map(|i| (pi, i)));
                } else {
                    let mut r = rng::seeded(rng::subseed(seed, p.name()));
                    let picks = rand::seq::index::sample(&mut r, n, *k);
                    coords.extend(picks.iter().map(|i| (pi, i)));
                }
            }
        }
        SamplePlan::Global(k) => {
            let total: usize = params.iter().map(|p| p.numel()).sum();
            let mut r = rng::seeded(rng::subseed(seed, "global-sample"));
            let picks = rand::seq::index::sample(&mut r, total, (*k).min(total));
            let mut flat: Vec<usize> = picks.iter().collect();
            flat.sort_unstable();
            let mut base = 0;
            let mut pi = 0;
            for f in flat {
                while f >= base + params[pi].numel() {
                    base += params[pi].numel();
                    pi += 1;
                }
                coords.push((pi, f - base));
            }
        }
    }
    coords
}

/// Runs one component check: `analytic` must build the f32 graph, call
/// backward and leave gradients on `params`; `loss64` must recompute the
/// same scalar loss in f64 from the current parameter values.
pub fn run_check(
    component: &str,
    params: &[Param],
    plan: SamplePlan,
    seed: u64,
    analytic: &mut dyn FnMut() -> Result<()>,
    loss64: &mut dyn FnMut() -> Result<f64>,
) -> Result<CheckReport> {
    for p in params {
        p.zero_grad();
    }
    analytic()?;

    let corrupt = corruption_requested(component);
    let coords = pick_coords(params, &plan, seed);
    let mut max_rel = 0.0f64;
    for (slot, &(pi, idx)) in coords.iter().enumerate() {
        let p = &params[pi];
        let mut analytic_g = p.grad()[idx] as f64;
        if corrupt && slot == 0 {
            analytic_g += 1.0;
        }

        let orig = p.value()[idx];
        let plus = (orig as f64 + FD_EPS) as f32;
        let minus = (orig as f64 - FD_EPS) as f32;
        p.update_value(|v| v[idx] = plus);
        let lp = loss64()?;
        p.update_value(|v| v[idx] = minus);
        let lm = loss64()?;
        p.update_value(|v| v[idx] = orig);

        let dx = plus as f64 - minus as f64;
        let cd = (lp - lm) / dx;
        let rel = (analytic_g - cd).abs() / analytic_g.abs().max(cd.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(CheckReport { component: component.to_string(), max_rel, coords: coords.len() })
}

/// Gives every all-zero parameter small random values so paths gated by
/// zero-initialized weights still carry gradient signal.
pub fn nudge_zeros(params: &[Param], seed: u64) {
    for p in params {
        if p.value().iter().all(|&v| v == 0.0) {
            let mut r = rng::seeded(rng::subseed(seed, p.name()));
            p.update_value(|v| rng::fill_uniform(&mut r, v, 0.05));
        }
    }
}

/// Deterministic random weight tensor used to turn a map-valued output
/// into a scalar loss that exercises every output coordinate.
fn weighted_sum<T: Scalar>(g: &mut Graph<T>, y: &Tensor<T>, wseed: u64) -> Result<Tensor<T>> {
    let mut r = rng::seeded(wseed);
    let mut w = vec![0.0f32; y.numel()];
    rng::fill_uniform(&mut r, &mut w, 1.0);
    let wt = Tensor::<T>::from_f32_slice(&w, y.shape());
    let prod = g.mul(y, &wt)?;
    Ok(g.sum_all(&prod))
}

fn input_param(name: &str, shape: &[usize], seed: u64) -> Param {
    let mut r = rng::seeded(rng::subseed(seed, name));
    Param::new(name, shape, Init::Uniform { bound: 1.0 }, &mut r)
}

pub fn component_names() -> &'static [&'static str] {
    &[
        "conv2d",
        "linear",
        "activations",
        "softmax",
        "spectral_filter",
        "mfb",
        "channel_attention",
        "mafa",
        "umfeb",
        "conv_gate",
        "unet",
        "bce",
        "model",
    ]
}

/// Builds and checks one named component. Unknown names are a usage error
/// so the CLI can report them at exit code 2.
pub fn run_component(name: &str, seed: u64) -> Result<CheckReport> {
    let cseed = rng::subseed(seed, name);
    match name {
        "conv2d" => {
            let x = input_param("x", &[1, 3, 6, 6], cseed);
            let mut r = rng::seeded(rng::subseed(cseed, "layer"));
            let layer = Conv2dLayer::new("conv", 3, 4, 3, 1, 1, 1, &mut r);
            let mut params = vec![x.clone()];
            params.extend(layer.params());
            fn case<T: Scalar>(g: &mut Graph<T>, x: &Param, l: &Conv2dLayer, ws: u64) -> Result<Tensor<T>> {
                let xt = g.param(x);
                let y = l.forward(g, &xt)?;
                weighted_sum(g, &y, ws)
            }
            check_pair(name, &params, SamplePlan::All, cseed, |g| case(g, &x, &layer, cseed), |g| {
                case(g, &x, &layer, cseed)
            })
        }
        "linear" => {
            let x = input_param("x", &[2, 5, 7], cseed);
            let mut r = rng::seeded(rng::subseed(cseed, "layer"));
            let layer = LinearLayer::new("lin", 7, 3, &mut r);
            let mut params = vec![x.clone()];
            params.extend(layer.params());
            fn case<T: Scalar>(g: &mut Graph<T>, x: &Param, l: &LinearLayer, ws: u64) -> Result<Tensor<T>> {
                let xt = g.param(x);
                let y = l.forward(g, &xt)?;
                weighted_sum(g, &y, ws)
            }
            check_pair(name, &params, SamplePlan::All, cseed, |g| case(g, &x, &layer, cseed), |g| {
                case(g, &x, &layer, cseed)
            })
        }
        "activations" => {
            let x = input_param("x", &[2, 16], cseed);
            // keep every coordinate at least 0.2 from the relu kink so the
            // symmetric difference never straddles it
            x.update_value(|v| {
                for u in v.iter_mut() {
                    if u.abs() < 0.2 {
                        *u = if *u < 0.0 { -0.25 } else { 0.25 };
                    }
                }
            });
            let params = vec![x.clone()];
            fn case<T: Scalar>(g: &mut Graph<T>, x: &Param, ws: u64) -> Result<Tensor<T>> {
                let xt = g.param(x);
                let a = g.gelu(&xt);
                let b = g.sigmoid(&xt);
                let c = g.relu(&xt);
                let ab = g.mul(&a, &b)?;
                let y = g.add(&ab, &c)?;
                weighted_sum(g, &y, ws)
            }
            check_pair(name, &params, SamplePlan::All, cseed, |g| case(g, &x, cseed), |g| case(g, &x, cseed))
        }
        "softmax" => {
            let x = input_param("x", &[2, 3, 5], cseed);
            let params = vec![x.clone()];
            fn case<T: Scalar>(g: &mut Graph<T>, x: &Param, ws: u64) -> Result<Tensor<T>> {
                let xt = g.param(x);
                let inner = g.softmax(&xt, 2)?;
                let middle = g.softmax(&xt, 1)?;
                let y = g.add(&inner, &middle)?;
                weighted_sum(g, &y, ws)
            }
            check_pair(name, &params, SamplePlan::All, cseed, |g| case(g, &x, cseed), |g| case(g, &x, cseed))
        }
        "spectral_filter" => {
            let x = input_param("x", &[1, 2, 16, 16], cseed);
            let kernel = FrequencyKernel::identity("filter", 2, 8);
            let mut r = rng::seeded(rng::subseed(cseed, "kernel"));
            for p in kernel.params() {
                p.update_value(|v| {
                    for u in v.iter_mut() {
                        *u += r.gen_range(-0.4..0.4);
                    }
                });
            }
            let mut params = vec![x.clone()];
            params.extend(kernel.params());
            fn case<T: Scalar>(g: &mut Graph<T>, x: &Param, k: &FrequencyKernel, ws: u64) -> Result<Tensor<T>> {
                let xt = g.param(x);
                let y = spectral_branch(g, &xt, k)?;
                weighted_sum(g, &y, ws)
            }
            check_pair(name, &params, SamplePlan::PerParam(40), cseed, |g| case(g, &x, &kernel, cseed), |g| {
                case(g, &x, &kernel, cseed)
            })
        }
        "mfb" => {
            let x = input_param("x", &[1, 6, 8, 8], cseed);
            let mut r = rng::seeded(rng::subseed(cseed, "block"));
            let block = MfbBlock::new("mfb", 6, 4, &mut r);
            let mut params = vec![x.clone()];
            params.extend(block.params());
            fn case<T: Scalar>(g: &mut Graph<T>, x: &Param, b: &MfbBlock, ws: u64) -> Result<Tensor<T>> {
                let xt = g.param(x);
                let y = b.forward(g, &xt)?;
                weighted_sum(g, &y, ws)
            }
            check_pair(name, &params, SamplePlan::PerParam(30), cseed, |g| case(g, &x, &block, cseed), |g| {
                case(g, &x, &block, cseed)
            })
        }
        "channel_attention" => {
            let x = input_param("x", &[2, 4, 5, 5], cseed);
            let mut r = rng::seeded(rng::subseed(cseed, "block"));
            let block = ChannelAttention::new("ca", 4, &mut r)?;
            let mut params = vec![x.clone()];
            params.extend(block.params());
            fn case<T: Scalar>(g: &mut Graph<T>, x: &Param, b: &ChannelAttention, ws: u64) -> Result<Tensor<T>> {
                let xt = g.param(x);
                let y = b.forward(g, &xt)?;
                weighted_sum(g, &y, ws)
            }
            check_pair(name, &params, SamplePlan::All, cseed, |g| case(g, &x, &block, cseed), |g| {
                case(g, &x, &block, cseed)
            })
        }
        "mafa" => {
            let x = input_param("x", &[1, 8, 8, 8], cseed);
            let mut r = rng::seeded(rng::subseed(cseed, "block"));
            let block = MafaBlock::new("adapter", 8, 8, true, &mut r)?;
            let mut params = vec![x.clone()];
            params.extend(block.params());
            nudge_zeros(&params, cseed);
            fn case<T: Scalar>(g: &mut Graph<T>, x: &Param, b: &MafaBlock, ws: u64) -> Result<Tensor<T>> {
                let xt = g.param(x);
                let y = b.forward_map(g, &xt)?;
                weighted_sum(g, &y, ws)
            }
            check_pair(name, &params, SamplePlan::PerParam(20), cseed, |g| case(g, &x, &block, cseed), |g| {
                case(g, &x, &block, cseed)
            })
        }
        "umfeb" => {
            let f1 = input_param("f1", &[1, 4, 8, 8], cseed);
            let c1 = input_param("c1", &[1, 4, 8, 8], rng::subseed(cseed, "c1"));
            let c2 = input_param("c2", &[1, 4, 4, 4], rng::subseed(cseed, "c2"));
            let mut r = rng::seeded(rng::subseed(cseed, "block"));
            let block = UmfebBlock::new("um", 4, 8, &mut r)?;
            let mut params = vec![f1.clone(), c1.clone(), c2.clone()];
            params.extend(block.params());
            fn case<T: Scalar>(
                g: &mut Graph<T>,
                f1: &Param,
                c1: &Param,
                c2: &Param,
                b: &UmfebBlock,
                ws: u64,
            ) -> Result<Tensor<T>> {
                let f1t = g.param(f1);
                let c1t = g.param(c1);
                let c2t = g.param(c2);
                let y = b.forward(g, &f1t, &[&c1t, &c2t])?;
                weighted_sum(g, &y, ws)
            }
            check_pair(
                name,
                &params,
                SamplePlan::PerParam(16),
                cseed,
                |g| case(g, &f1, &c1, &c2, &block, cseed),
                |g| case(g, &f1, &c1, &c2, &block, cseed),
            )
        }
        "conv_gate" => {
            let x = input_param("x", &[1, 3, 6, 6], cseed);
            let mut r = rng::seeded(rng::subseed(cseed, "block"));
            let block = ConvGate::new("gate", 3, &mut r);
            let mut params = vec![x.clone()];
            params.extend(block.params());
            fn case<T: Scalar>(g: &mut Graph<T>, x: &Param, b: &ConvGate, ws: u64) -> Result<Tensor<T>> {
                let xt = g.param(x);
                let y = b.forward(g, &xt)?;
                weighted_sum(g, &y, ws)
            }
            check_pair(name, &params, SamplePlan::PerParam(30), cseed, |g| case(g, &x, &block, cseed), |g| {
                case(g, &x, &block, cseed)
            })
        }
        "unet" => {
            let x = input_param("x", &[1, 4, 8, 8], cseed);
            let mut r = rng::seeded(rng::subseed(cseed, "block"));
            let block = crate::model::Unet::new("u", 4, &mut r);
            let mut params = vec![x.clone()];
            params.extend(block.params());
            nudge_zeros(&params, cseed);
            fn case<T: Scalar>(g: &mut Graph<T>, x: &Param, b: &crate::model::Unet, ws: u64) -> Result<Tensor<T>> {
                let xt = g.param(x);
                let y = b.forward(g, &xt)?;
                weighted_sum(g, &y, ws)
            }
            check_pair(name, &params, SamplePlan::PerParam(16), cseed, |g| case(g, &x, &block, cseed), |g| {
                case(g, &x, &block, cseed)
            })
        }
        "bce" => {
            let logits = input_param("logits", &[1, 1, 4, 4], cseed);
            logits.update_value(|v| v.iter_mut().for_each(|u| *u *= 3.0));
            let mut r = rng::seeded(rng::subseed(cseed, "gt"));
            let gt: Vec<f32> = (0..16).map(|_| r.gen_range(0.0..1.0)).collect();
            let params = vec![logits.clone()];
            fn case<T: Scalar>(g: &mut Graph<T>, logits: &Param, gt: &[f32]) -> Result<Tensor<T>> {
                let lt = g.param(logits);
                let gtt = Tensor::<T>::from_f32_slice(gt, &[1, 1, 4, 4]);
                g.bce_with_logits(&lt, &gtt)
            }
            check_pair(name, &params, SamplePlan::All, cseed, |g| case(g, &logits, &gt), |g| {
                case(g, &logits, &gt)
            })
        }
        "model" => {
            let cfg = Config::default();
            let model = SplfModel::new(&cfg)?;
            let sample = data::synth_dataset(cfg.seed, 1, cfg.image_size).remove(0);
            let img: Vec<f32> = sample.image.data().to_vec();
            let gt: Vec<f32> = sample.gt.data().to_vec();
            let s = cfg.image_size;
            let params = model.trainable_params();
            nudge_zeros(&params, cseed);
            fn case<T: Scalar>(g: &mut Graph<T>, m: &SplfModel, img: &[f32], gt: &[f32], s: usize) -> Result<Tensor<T>> {
                let it = Tensor::<T>::from_f32_slice(img, &[1, 3, s, s]);
                let gtt = Tensor::<T>::from_f32_slice(gt, &[1, 1, s, s]);
                let out = m.forward(g, &it)?;
                total_loss(g, &out.logits, &gtt)
            }
            check_pair(
                name,
                &params,
                SamplePlan::Global(40),
                cseed,
                |g| case(g, &model, &img, &gt, s),
                |g| case(g, &model, &img, &gt, s),
            )
        }
        other => Err(Error::Usage(format!(
            "unknown component {other:?}; valid names: {}",
            component_names().join(", ")
        ))),
    }
}

/// Adapter gluing a generic forward to `run_check`: the same builder is
/// instantiated at f32 (recording, backward) and f64 (value only).
fn check_pair<F32Case, F64Case>(
    name: &str,
    params: &[Param],
    plan: SamplePlan,
    seed: u64,
    mut f32_case: F32Case,
    mut f64_case: F64Case,
) -> Result<CheckReport>
where
    F32Case: FnMut(&mut Graph<f32>) -> Result<Tensor<f32>>,
    F64Case: FnMut(&mut Graph<f64>) -> Result<Tensor<f64>>,
{
    let mut analytic = || -> Result<()> {
        let mut g = Graph::<f32>::new();
        let loss = f32_case(&mut g)?;
        g.backward(&loss)
    };
    let mut loss64 = || -> Result<f64> {
        let mut g = Graph::<f64>::inference();
        let loss = f64_case(&mut g)?;
        Ok(loss.item())
    };
    run_check(name, params, plan, seed, &mut analytic, &mut loss64)
}
