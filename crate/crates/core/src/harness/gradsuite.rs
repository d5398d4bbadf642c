//! Finite-difference checks of every graph primitive and of a small
//! end-to-end model, all in `f64`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{SampleRecord, PANELS};
use crate::error::{invalid, Error, Result};
use crate::model::{forward_batch, init_params, Aggregation, InputEncoder, ModelConfig};
use crate::optim::{activation_penalty, l2_penalty};
use crate::tensor::{grad_check, GradCheckReport, Graph, ParamSet, Tensor, Var};

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScale {
    /// 16x16 panels, one relation layer.
    Tiny,
    /// 32x32 panels, two relation layers with mean aggregation and dropout.
    Small,
}

impl std::str::FromStr for GradScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(GradScale::Tiny),
            "small" => Ok(GradScale::Small),
            _ => Err(invalid!("unknown gradcheck scale {s:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            // keep values away from the ReLU kink
            let x: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::new(shape, v).expect("shape matches")
}

fn params(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, shape) in shapes {
        p.push(*name, random(rng, shape)).expect("unique names");
    }
    p
}

/// `sum((y + c)^2)` for a fixed random `c`, so every output element gets a
/// distinct nonzero adjoint.
fn readout(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random(&mut rng, g.shape(y));
    let c = g.constant(c)?;
    let s = g.add(y, c)?;
    g.sum_squares(s)
}

fn case<F>(name: &str, mut p: ParamSet<f64>, build: F) -> Result<GradCase>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let t = Instant::now();
    let report = grad_check(&mut p, EPS, build)?;
    Ok(GradCase {
        name: name.into(),
        report,
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// One check per graph primitive.
pub fn primitive_checks() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut out = Vec::new();

    let p = params(
        &mut rng,
        &[("x", &[2, 2, 5, 5]), ("k", &[3, 2, 3, 3]), ("b", &[3])],
    );
    out.push(case("conv2d", p, |g| {
        let (x, k, b) = (g.param(0), g.param(1), g.param(2));
        let y = g.conv2d(x, k, b, 2, 1)?;
        readout(g, y, 1)
    })?);

    let p = params(&mut rng, &[("x", &[4, 3]), ("w", &[5, 3]), ("b", &[5])]);
    out.push(case("linear", p, |g| {
        let (x, w, b) = (g.param(0), g.param(1), g.param(2));
        let y = g.linear(x, w, Some(b))?;
        readout(g, y, 2)
    })?);

    let p = params(&mut rng, &[("x", &[4, 3]), ("w", &[5, 3])]);
    out.push(case("linear_no_bias", p, |g| {
        let (x, w) = (g.param(0), g.param(1));
        let y = g.linear(x, w, None)?;
        readout(g, y, 3)
    })?);

    let p = params(&mut rng, &[("x", &[6, 2]), ("w", &[3, 4]), ("b", &[3])]);
    out.push(case("pair_linear", p, |g| {
        let (x, w, b) = (g.param(0), g.param(1), g.param(2));
        let y = g.pair_linear(x, w, b, 3)?;
        readout(g, y, 4)
    })?);

    let p = params(&mut rng, &[("x", &[4, 2]), ("w", &[3, 4]), ("b", &[3])]);
    out.push(case("pair_linear_indexed", p, |g| {
        let (x, w, b) = (g.param(0), g.param(1), g.param(2));
        let y = g.pair_linear_indexed(x, w, b, vec![(0, 1), (3, 3), (2, 0), (0, 1), (1, 2)])?;
        readout(g, y, 5)
    })?);

    let p = params(&mut rng, &[("x", &[3, 4])]);
    out.push(case("relu", p, |g| {
        let x = g.param(0);
        let y = g.relu(x)?;
        readout(g, y, 6)
    })?);

    let p = params(&mut rng, &[("x", &[2, 3])]);
    out.push(case("mask", p, |g| {
        let x = g.param(0);
        let y = g.mask(x, vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0])?;
        readout(g, y, 7)
    })?);

    let p = params(&mut rng, &[("x", &[2, 3, 2])]);
    out.push(case("reshape", p, |g| {
        let x = g.param(0);
        let y = g.reshape(x, &[3, 4])?;
        readout(g, y, 8)
    })?);

    let p = params(&mut rng, &[("a", &[3, 2]), ("b", &[3, 4])]);
    out.push(case("concat_cols", p, |g| {
        let (a, b) = (g.param(0), g.param(1));
        let y = g.concat_cols(a, b)?;
        readout(g, y, 9)
    })?);

    let p = params(&mut rng, &[("x", &[4, 3])]);
    out.push(case("gather_rows", p, |g| {
        let x = g.param(0);
        let y = g.gather_rows(x, vec![3, 0, 3, 1])?;
        readout(g, y, 10)
    })?);

    let p = params(&mut rng, &[("x", &[6, 2])]);
    out.push(case("group_sum", p, |g| {
        let x = g.param(0);
        let y = g.group_sum(x, 3, 0.5)?;
        readout(g, y, 11)
    })?);

    let p = params(&mut rng, &[("x", &[5, 2])]);
    out.push(case("segment_sum", p, |g| {
        let x = g.param(0);
        let y = g.segment_sum(x, vec![0, 3, 4, 7], vec![0, 4, 4, 2, 1, 3, 0], 1.5)?;
        readout(g, y, 12)
    })?);

    let p = params(&mut rng, &[("a", &[2, 3]), ("b", &[2, 3])]);
    out.push(case("add_scale", p, |g| {
        let (a, b) = (g.param(0), g.param(1));
        let s = g.add(a, b)?;
        let y = g.scale(s, -0.7)?;
        readout(g, y, 13)
    })?);

    let p = params(&mut rng, &[("x", &[2, 3])]);
    out.push(case("sum", p, |g| {
        let x = g.param(0);
        let s = g.sum(x)?;
        let y = g.reshape(s, &[1])?;
        readout(g, y, 14)
    })?);

    let p = params(&mut rng, &[("a", &[2, 3]), ("b", &[4])]);
    out.push(case("mean_square", p, |g| {
        let (a, b) = (g.param(0), g.param(1));
        let m = g.mean_square(&[a, b])?;
        let y = g.reshape(m, &[1])?;
        readout(g, y, 15)
    })?);

    let p = params(&mut rng, &[("s", &[8])]);
    out.push(case("softmax_cross_entropy", p, |g| {
        let s = g.param(0);
        g.softmax_cross_entropy(s, 5)
    })?);

    let p = params(&mut rng, &[("s", &[3, 8])]);
    out.push(case("softmax_cross_entropy_rows", p, |g| {
        let s = g.param(0);
        g.softmax_cross_entropy_rows(s, &[0, 7, 3])
    })?);

    Ok(out)
}

/// Model configuration used by the end-to-end check at `scale`.
pub fn gradcheck_model(scale: GradScale) -> ModelConfig {
    match scale {
        GradScale::Tiny => ModelConfig::tiny(),
        GradScale::Small => ModelConfig {
            relation_layers: 2,
            image_size: 32,
            conv_channels: 3,
            aggregation: Aggregation::Mean,
            ..ModelConfig::tiny()
        },
    }
}

/// Random-pixel samples; the check needs inputs, not puzzles.
fn noise_samples(size: usize, count: usize, seed: u64) -> Vec<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let panels = (0..PANELS * size * size).map(|_| rng.gen()).collect();
            SampleRecord::new(size, panels, (3 * i + 1) % 8, Vec::new()).expect("valid sample")
        })
        .collect()
}

/// Cross-entropy plus activation and L2 penalties of a whole model.
pub fn model_check(scale: GradScale) -> Result<GradCase> {
    let cfg = gradcheck_model(scale);
    let samples = noise_samples(cfg.image_size, 2, 7);
    let refs: Vec<&SampleRecord> = samples.iter().collect();
    let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
    let encoder = InputEncoder::<f64>::new(&cfg)?;
    let dropout = (scale == GradScale::Small).then_some(99);
    let p = init_params(&cfg, 11)?.cast::<f64>();
    let name = match scale {
        GradScale::Tiny => "wren_tiny",
        GradScale::Small => "mlrn_small",
    };
    case(name, p, |g| {
        let f = forward_batch(g, &cfg, &encoder, &refs, dropout)?;
        let ce = g.softmax_cross_entropy_rows(f.scores, &targets)?;
        let act = activation_penalty(g, f.phi_in, f.phi_out)?;
        let l2 = l2_penalty(g, 1e-2)?;
        let s = g.add(ce, act)?;
        g.add(s, l2)
    })
}

/// Every primitive check followed by the model check at `scale`.
pub fn gradcheck_suite(scale: GradScale) -> Result<Vec<GradCase>> {
    let mut cases = primitive_checks()?;
    cases.push(model_check(scale)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for c in primitive_checks().unwrap() {
            assert!(c.passed(), "{}: {:?}", c.name, c.report);
            assert!(c.report.checked > 0);
        }
    }
}
