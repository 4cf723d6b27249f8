//! Central finite-difference verification of analytic gradients.
//!
//! An operation under test maps input tensors to one output tensor. The
//! checker contracts the output with a fixed random weight tensor `w` to get
//! the scalar `f = Σ w·out` (accumulated in f64), feeds `w` as `grad_out` to
//! the analytic backward pass, and compares each input gradient entry with
//! `(f(x + h) − f(x − h)) / (x⁺ − x⁻)`, where `x⁺`/`x⁻` are the perturbed
//! values as actually stored in f32.
//!
//! f32 outputs put a noise floor of roughly 1e-4 on the numeric derivative
//! at `h = 1e-3`, so the relative error is taken against `max(|a|, |n|, 1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, ConvSaved};
use super::Tensor;
use crate::error::{Error, Result};

pub trait DiffOp {
    fn name(&self) -> String;
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;
    /// Gradients with respect to every input, given the output gradient.
    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f32,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Seed for the output contraction weights.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

fn contract(out: &Tensor, weights: &Tensor) -> f64 {
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(&o, &w)| o as f64 * w as f64)
        .sum()
}

pub fn grad_check(op: &dyn DiffOp, inputs: &[Tensor], config: &GradCheckConfig) -> Result<GradCheckReport> {
    let out = op.forward(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng);
    let analytic = op.backward(inputs, &weights)?;
    if analytic.len() != inputs.len() {
        return Err(Error::State(format!(
            "{}: backward returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (index, grad) in analytic.iter().enumerate() {
        inputs[index].same_shape(grad, "analytic gradient")?;
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for k in 0..inputs[index].numel() {
            let original = inputs[index].data()[k];
            let plus = original + config.step;
            let minus = original - config.step;
            probe[index].data_mut()[k] = plus;
            let f_plus = contract(&op.forward(&probe)?, &weights);
            probe[index].data_mut()[k] = minus;
            let f_minus = contract(&op.forward(&probe)?, &weights);
            probe[index].data_mut()[k] = original;

            let numeric = (f_plus - f_minus) / (plus as f64 - minus as f64);
            let a = grad.data()[k] as f64;
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(config.floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        reports.push(InputReport {
            index,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        op: op.name(),
        tolerance: config.tolerance,
        inputs: reports,
    })
}

/// `conv2d(input, weight, bias)`.
pub struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
}

impl DiffOp for Conv2dOp {
    fn name(&self) -> String {
        format!("conv2d(stride={}, padding={})", self.stride, self.padding)
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        ops::conv2d_forward(&inputs[0], &inputs[1], &inputs[2], self.stride, self.padding)
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let g = ops::conv2d_backward(grad_out, &ConvSaved::new(&inputs[0], &inputs[1], self.stride, self.padding))?;
        Ok(vec![g.input, g.weight, g.bias])
    }
}

/// `conv_transpose2d(input, weight, bias)`.
pub struct ConvTranspose2dOp {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl DiffOp for ConvTranspose2dOp {
    fn name(&self) -> String {
        format!(
            "conv_transpose2d(stride={}, padding={}, output_padding={})",
            self.stride, self.padding, self.output_padding
        )
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        ops::conv_transpose2d_forward(
            &inputs[0],
            &inputs[1],
            &inputs[2],
            self.stride,
            self.padding,
            self.output_padding,
        )
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let saved = ConvSaved {
            output_padding: self.output_padding,
            ..ConvSaved::new(&inputs[0], &inputs[1], self.stride, self.padding)
        };
        let g = ops::conv_transpose2d_backward(grad_out, &saved)?;
        Ok(vec![g.input, g.weight, g.bias])
    }
}

pub struct MaxPool2dOp;

impl DiffOp for MaxPool2dOp {
    fn name(&self) -> String {
        "maxpool2d".into()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(ops::maxpool2d_forward(&inputs[0])?.0)
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let (_, argmax) = ops::maxpool2d_forward(&inputs[0])?;
        Ok(vec![ops::maxpool2d_backward(grad_out, &argmax, inputs[0].shape())?])
    }
}

pub struct ReluOp;

impl DiffOp for ReluOp {
    fn name(&self) -> String {
        "relu".into()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(ops::relu(&inputs[0]))
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![ops::relu_backward(grad_out, &inputs[0])?])
    }
}

pub struct SigmoidOp;

impl DiffOp for SigmoidOp {
    fn name(&self) -> String {
        "sigmoid".into()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(ops::sigmoid(&inputs[0]))
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![ops::sigmoid_backward(grad_out, &ops::sigmoid(&inputs[0]))?])
    }
}

/// `mse(a, b)` with gradients for both operands.
pub struct MseOp;

impl DiffOp for MseOp {
    fn name(&self) -> String {
        "mse".into()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(ops::mse_loss(&inputs[0], &inputs[1])?))
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let ga = ops::mse_backward(&inputs[0], &inputs[1], grad_out.item()?)?;
        let gb = ops::scale(&ga, -1.0);
        Ok(vec![ga, gb])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Doubling;

    impl DiffOp for Doubling {
        fn name(&self) -> String {
            "2x".into()
        }
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            Ok(ops::scale(&inputs[0], 2.0))
        }
        fn backward(&self, _: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![ops::scale(grad_out, 2.0)])
        }
    }

    /// Correct forward, gradient off by a factor of 1.5.
    struct WrongGradient;

    impl DiffOp for WrongGradient {
        fn name(&self) -> String {
            "wrong".into()
        }
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            Ok(ops::scale(&inputs[0], 2.0))
        }
        fn backward(&self, _: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![ops::scale(grad_out, 3.0)])
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_op_is_exact() {
        let report = grad_check(&Doubling, &[random(&[4, 5], 1)], &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let report = grad_check(&WrongGradient, &[random(&[4, 5], 2)], &GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.1);
    }

    #[test]
    fn conv2d_random_case() {
        let inputs = [random(&[1, 2, 4, 4], 3), random(&[3, 2, 3, 3], 4), random(&[3], 5)];
        let op = Conv2dOp { stride: 1, padding: 1 };
        let report = grad_check(&op, &inputs, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn conv_transpose_single_pixel_case() {
        let inputs = [random(&[1, 1, 1, 1], 6), random(&[1, 1, 2, 2], 7), random(&[1], 8)];
        let op = ConvTranspose2dOp {
            stride: 2,
            padding: 0,
            output_padding: 0,
        };
        let report = grad_check(&op, &inputs, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sigmoid_at_fixed_points() {
        let x = Tensor::new(vec![3], vec![-2.0, 0.5, 3.0]).unwrap();
        let report = grad_check(&SigmoidOp, &[x], &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn mse_both_operands() {
        let report = grad_check(&MseOp, &[random(&[2, 3], 9), random(&[2, 3], 10)], &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
