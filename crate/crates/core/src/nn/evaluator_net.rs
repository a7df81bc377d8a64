//! Encoder / residual / decoder network mapping a stacked (reference, moving)
//! pair to a single-channel map bounded to [-2, 2].

use serde::{Deserialize, Serialize};

use super::{
    crop, crop_backward, init_conv, leaky_relu, leaky_relu_backward, pad_backward, pad_to_multiple, upsample2,
    upsample2_backward, Conv2d, ParamLayout, Tensor,
};
use crate::rng::SeedStream;
use crate::scalar::Scalar;

pub const OUTPUT_BOUND: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorArch {
    pub channels: [usize; 3],
    pub residual_blocks: usize,
}

impl Default for EvaluatorArch {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            residual_blocks: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvaluatorNet {
    arch: EvaluatorArch,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    d2: Conv2d,
    d1: Conv2d,
    head: Conv2d,
    len: usize,
}

struct BlockTrace<T> {
    cols_a: Vec<T>,
    hidden: Tensor<T>,
    cols_b: Vec<T>,
}

/// Intermediate values kept from a forward pass for the backward pass.
pub struct EvaluatorTrace<T> {
    pub output: Tensor<T>,
    height: usize,
    width: usize,
    padded: (usize, usize),
    cols_e1: Vec<T>,
    a1: Tensor<T>,
    cols_e2: Vec<T>,
    a2: Tensor<T>,
    cols_e3: Vec<T>,
    a3: Tensor<T>,
    blocks: Vec<BlockTrace<T>>,
    cols_d2: Vec<T>,
    t2: Tensor<T>,
    cols_d1: Vec<T>,
    t1: Tensor<T>,
    cols_head: Vec<T>,
    bounded: Tensor<T>,
}

impl EvaluatorNet {
    pub const DOWNSAMPLE: usize = 4;

    pub fn new(arch: EvaluatorArch) -> Self {
        let [c1, c2, c3] = arch.channels;
        let mut l = ParamLayout::default();
        let e1 = l.conv(2, c1, 3, 1);
        let e2 = l.conv(c1, c2, 3, 2);
        let e3 = l.conv(c2, c3, 3, 2);
        let blocks = (0..arch.residual_blocks).map(|_| (l.conv(c3, c3, 3, 1), l.conv(c3, c3, 3, 1))).collect();
        let d2 = l.conv(c3, c2, 3, 1);
        let d1 = l.conv(c2, c1, 3, 1);
        let head = l.conv(c1 + 2, 1, 3, 1);
        Self {
            arch,
            e1,
            e2,
            e3,
            blocks,
            d2,
            d1,
            head,
            len: l.len(),
        }
    }

    pub fn arch(&self) -> EvaluatorArch {
        self.arch
    }

    pub fn param_len(&self) -> usize {
        self.len
    }

    pub fn init_params<T: Scalar>(&self, stream: &mut SeedStream) -> Vec<T> {
        let mut p = vec![T::zero(); self.len];
        for conv in [&self.e1, &self.e2, &self.e3] {
            init_conv(conv, &mut p, 1.0, stream);
        }
        for (a, b) in &self.blocks {
            init_conv(a, &mut p, 1.0, stream);
            init_conv(b, &mut p, 0.1, stream);
        }
        init_conv(&self.d2, &mut p, 1.0, stream);
        init_conv(&self.d1, &mut p, 1.0, stream);
        init_conv(&self.head, &mut p, 0.1, stream);
        p
    }

    /// `input` holds the two stacked images (2 x H x W).
    pub fn forward<T: Scalar>(&self, params: &[T], input: &Tensor<T>) -> EvaluatorTrace<T> {
        let (height, width) = (input.height, input.width);
        let x = pad_to_multiple(input, Self::DOWNSAMPLE);
        let padded = (x.height, x.width);
        let (z, cols_e1) = self.e1.forward(params, &x);
        let a1 = leaky_relu(z);
        let (z, cols_e2) = self.e2.forward(params, &a1);
        let a2 = leaky_relu(z);
        let (z, cols_e3) = self.e3.forward(params, &a2);
        let a3 = leaky_relu(z);

        let mut h = a3.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (ca, cb) in &self.blocks {
            let (z, cols_a) = ca.forward(params, &h);
            let hidden = leaky_relu(z);
            let (r, cols_b) = cb.forward(params, &hidden);
            h.add_assign(&r);
            blocks.push(BlockTrace { cols_a, hidden, cols_b });
        }

        let (z, cols_d2) = self.d2.forward(params, &upsample2(&h));
        let t2 = leaky_relu(z);
        let mut u2 = t2.clone();
        u2.add_assign(&a2);
        let (z, cols_d1) = self.d1.forward(params, &upsample2(&u2));
        let t1 = leaky_relu(z);
        let mut u1 = t1.clone();
        u1.add_assign(&a1);
        let (z, cols_head) = self.head.forward(params, &Tensor::concat(&[&u1, &x]));
        let bound = T::lit(OUTPUT_BOUND);
        let mut bounded = z;
        for v in bounded.data.iter_mut() {
            *v = bound * v.tanh();
        }
        let output = crop(&bounded, height, width);
        EvaluatorTrace {
            output,
            height,
            width,
            padded,
            cols_e1,
            a1,
            cols_e2,
            a2,
            cols_e3,
            a3,
            blocks,
            cols_d2,
            t2,
            cols_d1,
            t1,
            cols_head,
            bounded,
        }
    }

    /// Backpropagates `grad_output` (1 x H x W). Parameter gradients are
    /// accumulated into `grads` when given; the input gradient (2 x H x W)
    /// is returned when `need_input` is set.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        trace: &EvaluatorTrace<T>,
        grad_output: &Tensor<T>,
        mut grads: Option<&mut [T]>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let (ph, pw) = trace.padded;
        let mut dz = crop_backward(grad_output, ph, pw);
        let bound = T::lit(OUTPUT_BOUND);
        for (g, &o) in dz.data.iter_mut().zip(&trace.bounded.data) {
            let t = o / bound;
            *g *= bound * (T::one() - t * t);
        }
        let dcat = self
            .head
            .backward(params, (ph, pw), &trace.cols_head, &dz, grads.as_deref_mut(), true)
            .expect("input gradient requested");
        let mut parts = dcat.split(&[self.arch.channels[0], 2]).into_iter();
        let du1 = parts.next().expect("two parts");
        let mut dx = parts.next().expect("two parts");

        let mut da1 = du1.clone();
        let dz = leaky_relu_backward(&trace.t1, du1);
        let dup = self
            .d1
            .backward(params, (ph, pw), &trace.cols_d1, &dz, grads.as_deref_mut(), true)
            .expect("input gradient requested");
        let du2 = upsample2_backward(&dup);

        let mut da2 = du2.clone();
        let dz = leaky_relu_backward(&trace.t2, du2);
        let dup = self
            .d2
            .backward(params, (ph / 2, pw / 2), &trace.cols_d2, &dz, grads.as_deref_mut(), true)
            .expect("input gradient requested");
        let mut dh = upsample2_backward(&dup);

        let quarter = (ph / 4, pw / 4);
        for ((ca, cb), bt) in self.blocks.iter().zip(&trace.blocks).rev() {
            let dhidden = cb
                .backward(params, quarter, &bt.cols_b, &dh, grads.as_deref_mut(), true)
                .expect("input gradient requested");
            let dz = leaky_relu_backward(&bt.hidden, dhidden);
            let dprev = ca
                .backward(params, quarter, &bt.cols_a, &dz, grads.as_deref_mut(), true)
                .expect("input gradient requested");
            dh.add_assign(&dprev);
        }

        let dz = leaky_relu_backward(&trace.a3, dh);
        let d = self
            .e3
            .backward(params, (ph / 2, pw / 2), &trace.cols_e3, &dz, grads.as_deref_mut(), true)
            .expect("input gradient requested");
        da2.add_assign(&d);
        let dz = leaky_relu_backward(&trace.a2, da2);
        let d = self
            .e2
            .backward(params, (ph, pw), &trace.cols_e2, &dz, grads.as_deref_mut(), true)
            .expect("input gradient requested");
        da1.add_assign(&d);
        let dz = leaky_relu_backward(&trace.a1, da1);
        let d = self.e1.backward(params, (ph, pw), &trace.cols_e1, &dz, grads, need_input);
        if !need_input {
            return None;
        }
        dx.add_assign(&d.expect("input gradient requested"));
        Some(pad_backward(&dx, trace.height, trace.width))
    }
}
