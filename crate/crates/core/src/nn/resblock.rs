use rand::Rng;

use super::{relu_backward, relu_forward, BatchNorm3d, Conv3d, Mode, ParamVisitor, Scalar, Tensor};

/// Pre-activation residual unit:
/// `y = shortcut(x) + conv2(relu(bn2(conv1(relu(bn1(x))))))`,
/// with an identity shortcut when widths match and a 1x1x1 projection
/// otherwise. Both convolutions are 3x3x3 with padding 1.
#[derive(Debug, Clone)]
pub struct ResBlock<T> {
    pub bn1: BatchNorm3d<T>,
    pub conv1: Conv3d<T>,
    pub bn2: BatchNorm3d<T>,
    pub conv2: Conv3d<T>,
    pub shortcut: Option<Conv3d<T>>,
    act1: Option<Tensor<T>>,
    act2: Option<Tensor<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            bn1: BatchNorm3d::new(in_channels),
            conv1: Conv3d::new(in_channels, out_channels, 3, rng),
            bn2: BatchNorm3d::new(out_channels),
            conv2: Conv3d::new(out_channels, out_channels, 3, rng),
            shortcut: (in_channels != out_channels)
                .then(|| Conv3d::new(in_channels, out_channels, 1, rng)),
            act1: None,
            act2: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.bn1.channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        if let Some(s) = self.shortcut.as_mut() {
            s.visit(&format!("{prefix}.shortcut"), f);
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let a1 = relu_forward(&self.bn1.forward(x, mode));
        let h = self.conv1.forward(&a1);
        let a2 = relu_forward(&self.bn2.forward(&h, mode));
        let mut y = self.conv2.forward(&a2);
        match self.shortcut.as_mut() {
            Some(s) => y.add_assign(&s.forward(x)),
            None => y.add_assign(x),
        }
        self.act1 = Some(a1);
        self.act2 = Some(a2);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let a1 = self.act1.take().expect("resblock backward before forward");
        let a2 = self.act2.take().expect("resblock backward before forward");
        let d_a2 = self.conv2.backward(dy);
        let d_h = self.bn2.backward(&relu_backward(&a2, &d_a2));
        let d_a1 = self.conv1.backward(&d_h);
        let mut dx = self.bn1.backward(&relu_backward(&a1, &d_a1));
        match self.shortcut.as_mut() {
            Some(s) => dx.add_assign(&s.backward(dy)),
            None => dx.add_assign(dy),
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.act1 = None;
        self.act2 = None;
        self.bn1.clear_cache();
        self.bn2.clear_cache();
        self.conv1.clear_cache();
        self.conv2.clear_cache();
        if let Some(s) = self.shortcut.as_mut() {
            s.clear_cache();
        }
    }
}
