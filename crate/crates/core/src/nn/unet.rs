//! Small U-shaped network predicting a displacement field from a stacked
//! (moving, target) pair.

use serde::{Deserialize, Serialize};

use super::{
    crop, crop_backward, init_conv, leaky_relu, leaky_relu_backward, pad_backward, pad_to_multiple, upsample2,
    upsample2_backward, Conv2d, ParamLayout, Tensor,
};
use crate::rng::SeedStream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetArch {
    pub base_channels: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        Self { base_channels: 16 }
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    arch: UNetArch,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    mid: Conv2d,
    d2: Conv2d,
    d1: Conv2d,
    d0: Conv2d,
    flow: Conv2d,
    len: usize,
}

pub struct UNetTrace<T> {
    /// Channel 0 holds dy, channel 1 holds dx.
    pub output: Tensor<T>,
    height: usize,
    width: usize,
    padded: (usize, usize),
    cols: [Vec<T>; 8],
    acts: [Tensor<T>; 7],
}

impl UNet {
    pub const DOWNSAMPLE: usize = 4;

    pub fn new(arch: UNetArch) -> Self {
        let b = arch.base_channels;
        let mut l = ParamLayout::default();
        let e1 = l.conv(2, b, 3, 1);
        let e2 = l.conv(b, 2 * b, 3, 2);
        let e3 = l.conv(2 * b, 2 * b, 3, 2);
        let mid = l.conv(2 * b, 2 * b, 3, 1);
        let d2 = l.conv(4 * b, 2 * b, 3, 1);
        let d1 = l.conv(3 * b, b, 3, 1);
        let d0 = l.conv(b, b, 3, 1);
        let flow = l.conv(b, 2, 3, 1);
        Self {
            arch,
            e1,
            e2,
            e3,
            mid,
            d2,
            d1,
            d0,
            flow,
            len: l.len(),
        }
    }

    pub fn arch(&self) -> UNetArch {
        self.arch
    }

    pub fn param_len(&self) -> usize {
        self.len
    }

    /// The flow layer starts at zero so the untrained network is the
    /// identity transform.
    pub fn init_params<T: Scalar>(&self, stream: &mut SeedStream) -> Vec<T> {
        let mut p = vec![T::zero(); self.len];
        for conv in [&self.e1, &self.e2, &self.e3, &self.mid, &self.d2, &self.d1, &self.d0] {
            init_conv(conv, &mut p, 1.0, stream);
        }
        init_conv(&self.flow, &mut p, 0.0, stream);
        p
    }

    pub fn forward<T: Scalar>(&self, params: &[T], input: &Tensor<T>) -> UNetTrace<T> {
        let (height, width) = (input.height, input.width);
        let x = pad_to_multiple(input, Self::DOWNSAMPLE);
        let padded = (x.height, x.width);
        let (z, c0) = self.e1.forward(params, &x);
        let e1 = leaky_relu(z);
        let (z, c1) = self.e2.forward(params, &e1);
        let e2 = leaky_relu(z);
        let (z, c2) = self.e3.forward(params, &e2);
        let e3 = leaky_relu(z);
        let (z, c3) = self.mid.forward(params, &e3);
        let m = leaky_relu(z);
        let (z, c4) = self.d2.forward(params, &Tensor::concat(&[&upsample2(&m), &e2]));
        let d2 = leaky_relu(z);
        let (z, c5) = self.d1.forward(params, &Tensor::concat(&[&upsample2(&d2), &e1]));
        let d1 = leaky_relu(z);
        let (z, c6) = self.d0.forward(params, &d1);
        let d0 = leaky_relu(z);
        let (flow, c7) = self.flow.forward(params, &d0);
        UNetTrace {
            output: crop(&flow, height, width),
            height,
            width,
            padded,
            cols: [c0, c1, c2, c3, c4, c5, c6, c7],
            acts: [e1, e2, e3, m, d2, d1, d0],
        }
    }

    /// Backpropagates a gradient on the 2-channel flow; accumulates
    /// parameter gradients and returns the input gradient if requested.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        trace: &UNetTrace<T>,
        grad_output: &Tensor<T>,
        grads: &mut [T],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let b = self.arch.base_channels;
        let (ph, pw) = trace.padded;
        let half = (ph / 2, pw / 2);
        let quarter = (ph / 4, pw / 4);
        let [c0, c1, c2, c3, c4, c5, c6, c7] = &trace.cols;
        let [e1, e2, e3, m, d2, d1, d0] = &trace.acts;
        let g = Some(&mut *grads);
        let dflow = crop_backward(grad_output, ph, pw);
        let dd0 = self.flow.backward(params, (ph, pw), c7, &dflow, g, true).expect("input grad");
        let dz = leaky_relu_backward(d0, dd0);
        let dd1 = self.d0.backward(params, (ph, pw), c6, &dz, Some(&mut *grads), true).expect("input grad");
        let dz = leaky_relu_backward(d1, dd1);
        let dcat = self.d1.backward(params, (ph, pw), c5, &dz, Some(&mut *grads), true).expect("input grad");
        let mut parts = dcat.split(&[2 * b, b]).into_iter();
        let dd2 = upsample2_backward(&parts.next().expect("part"));
        let mut de1 = parts.next().expect("part");
        let dz = leaky_relu_backward(d2, dd2);
        let dcat = self.d2.backward(params, half, c4, &dz, Some(&mut *grads), true).expect("input grad");
        let mut parts = dcat.split(&[2 * b, 2 * b]).into_iter();
        let dm = upsample2_backward(&parts.next().expect("part"));
        let mut de2 = parts.next().expect("part");
        let dz = leaky_relu_backward(m, dm);
        let de3 = self.mid.backward(params, quarter, c3, &dz, Some(&mut *grads), true).expect("input grad");
        let dz = leaky_relu_backward(e3, de3);
        de2.add_assign(&self.e3.backward(params, half, c2, &dz, Some(&mut *grads), true).expect("input grad"));
        let dz = leaky_relu_backward(e2, de2);
        de1.add_assign(&self.e2.backward(params, (ph, pw), c1, &dz, Some(&mut *grads), true).expect("input grad"));
        let dz = leaky_relu_backward(e1, de1);
        let dx = self.e1.backward(params, (ph, pw), c0, &dz, Some(&mut *grads), need_input)?;
        Some(pad_backward(&dx, trace.height, trace.width))
    }
}
