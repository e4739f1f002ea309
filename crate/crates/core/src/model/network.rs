use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::roipool::roipool;
use super::{ModelConfig, Task};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{
    relu_backward, relu_forward, BatchNorm3d, Conv3d, Linear, MaxPool3d, Mode, Param,
    ParamVisitor, ResBlock, Scalar, Tensor, Upsample3d,
};

/// Backbone, segmentation head and one linear head per classification task.
///
/// Backbone: conv(1 -> C/2), BN, ReLU, conv(C/2 -> C), maxpool(/f),
/// `n_resblocks` pre-activation ResBlocks at width C, a closing BN and ReLU,
/// trilinear upsample (x f). The output feature map has C channels at the
/// input's spatial shape.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub stem_conv1: Conv3d<T>,
    pub stem_bn: BatchNorm3d<T>,
    pub stem_conv2: Conv3d<T>,
    pub pool: MaxPool3d,
    pub blocks: Vec<ResBlock<T>>,
    pub out_bn: BatchNorm3d<T>,
    pub upsample: Upsample3d,
    pub seg_block: ResBlock<T>,
    pub seg_out: Conv3d<T>,
    pub heads: BTreeMap<Task, Linear<T>>,
    stem_act: Option<Tensor<T>>,
    out_act: Option<Tensor<T>>,
    backbone_calls: usize,
}

/// Per-tumor outputs of [`Network::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct TumorOutput<T> {
    pub bbox: BBox,
    pub embedding: Vec<T>,
    pub logits: BTreeMap<Task, Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    /// `[1, 1, D, H, W]` voxelwise tumor logits.
    pub seg_logits: Tensor<T>,
    pub tumors: Vec<TumorOutput<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let stem = config.stem_channels();
        let stem_conv1 = Conv3d::new(1, stem, 3, &mut rng);
        let stem_conv2 = Conv3d::new(stem, c, 3, &mut rng);
        let blocks = (0..config.n_resblocks)
            .map(|_| ResBlock::new(c, c, &mut rng))
            .collect();
        let seg_block = ResBlock::new(c, c, &mut rng);
        let seg_out = Conv3d::new(c, 1, 1, &mut rng);
        let heads = Task::CLASSIFICATION
            .into_iter()
            .map(|t| (t, Linear::new(c, config.n_classes(t).unwrap(), &mut rng)))
            .collect();
        Ok(Self {
            config: config.clone(),
            stem_conv1,
            stem_bn: BatchNorm3d::new(stem),
            stem_conv2,
            pool: MaxPool3d::new(config.down_up_factor),
            blocks,
            out_bn: BatchNorm3d::new(c),
            upsample: Upsample3d::new(config.down_up_factor),
            seg_block,
            seg_out,
            heads,
            stem_act: None,
            out_act: None,
            backbone_calls: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Number of backbone passes run so far.
    pub fn backbone_calls(&self) -> usize {
        self.backbone_calls
    }

    /// Visit every parameter and buffer in a fixed order.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.stem_conv1.visit("backbone.stem_conv1", f);
        self.stem_bn.visit("backbone.stem_bn", f);
        self.stem_conv2.visit("backbone.stem_conv2", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("backbone.block{i}"), f);
        }
        self.out_bn.visit("backbone.out_bn", f);
        self.seg_block.visit("seg_head.block", f);
        self.seg_out.visit("seg_head.out", f);
        for (task, head) in self.heads.iter_mut() {
            head.visit(&format!("head.{}", task.name()), f);
        }
    }

    /// Trainable scalar count.
    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| {
            if p.trainable {
                n += p.len();
            }
        });
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p: &mut Param<T>| p.zero_grad());
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != 1 {
            return Err(Error::Shape(format!(
                "backbone expects 1 input channel, got {}",
                x.channels()
            )));
        }
        let f = self.config.down_up_factor;
        for (axis, &side) in x.spatial().iter().enumerate() {
            if side == 0 || side % f != 0 {
                return Err(Error::Shape(format!(
                    "spatial side not divisible by {f} (axis {axis}: {side})"
                )));
            }
        }
        Ok(())
    }

    pub fn backbone_forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.backbone_calls += 1;
        let h = self.stem_conv1.forward(x);
        let a = relu_forward(&self.stem_bn.forward(&h, mode));
        let h = self.stem_conv2.forward(&a);
        self.stem_act = Some(a);
        let mut h = self.pool.forward(&h);
        for b in self.blocks.iter_mut() {
            h = b.forward(&h, mode);
        }
        let a = relu_forward(&self.out_bn.forward(&h, mode));
        let out = self.upsample.forward(&a);
        self.out_act = Some(a);
        Ok(out)
    }

    /// Backpropagate a feature-map gradient through the backbone.
    pub fn backbone_backward(&mut self, dfeat: &Tensor<T>) {
        let g = self.upsample.backward(dfeat);
        let a = self.out_act.take().expect("backbone backward before forward");
        let mut g = self.out_bn.backward(&relu_backward(&a, &g));
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        let g = self.pool.backward(&g);
        let g = self.stem_conv2.backward(&g);
        let a = self.stem_act.take().expect("backbone backward before forward");
        let g = self.stem_bn.backward(&relu_backward(&a, &g));
        self.stem_act = Some(a);
        self.stem_conv1.backward(&g);
    }

    /// One ResBlock then a 1x1x1 convolution to a single logit channel.
    pub fn segmentation_head(&mut self, feat: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.seg_block.forward(feat, mode);
        self.seg_out.forward(&h)
    }

    pub fn segmentation_head_backward(&mut self, dlogits: &Tensor<T>) -> Tensor<T> {
        let g = self.seg_out.backward(dlogits);
        self.seg_block.backward(&g)
    }

    pub fn classification_head(&self, task: Task, embedding: &[T]) -> Result<Vec<T>> {
        let head = self
            .heads
            .get(&task)
            .ok_or_else(|| Error::config("task", format!("no classification head for `{task}`")))?;
        if embedding.len() != head.in_features {
            return Err(Error::Shape(format!(
                "embedding length {} != {}",
                embedding.len(),
                head.in_features
            )));
        }
        Ok(head.forward(embedding))
    }

    /// Accumulate head gradients; returns the embedding gradient.
    pub fn classification_head_backward(
        &mut self,
        task: Task,
        embedding: &[T],
        dlogits: &[T],
    ) -> Result<Vec<T>> {
        let head = self
            .heads
            .get_mut(&task)
            .ok_or_else(|| Error::config("task", format!("no classification head for `{task}`")))?;
        Ok(head.backward(embedding, dlogits))
    }

    /// Inference on one `[1, 1, D, H, W]` patch: a single backbone pass shared
    /// by the segmentation head and every box.
    pub fn forward(&mut self, patch: &Tensor<T>, bboxes: &[BBox]) -> Result<ModelOutput<T>> {
        if patch.batch() != 1 {
            return Err(Error::Shape("forward expects a single patch".into()));
        }
        self.check_input(patch)?;
        for b in bboxes {
            b.validate()?;
            if !b.is_within(patch.spatial()) {
                return Err(Error::BBox(format!("{b} is outside the patch")));
            }
        }
        let feat = self.backbone_forward(patch, Mode::Eval)?;
        let seg_logits = self.segmentation_head(&feat, Mode::Eval);
        let mut tumors = Vec::with_capacity(bboxes.len());
        for b in bboxes {
            let (embedding, _) = roipool(&feat, 0, b)?;
            let mut logits = BTreeMap::new();
            for task in Task::CLASSIFICATION {
                logits.insert(task, self.classification_head(task, &embedding)?);
            }
            tumors.push(TumorOutput {
                bbox: *b,
                embedding,
                logits,
            });
        }
        self.clear_cache();
        Ok(ModelOutput { seg_logits, tumors })
    }

    /// Embeddings only (no segmentation head), inference mode.
    pub fn embed(&mut self, patch: &Tensor<T>, bboxes: &[BBox]) -> Result<Vec<Vec<T>>> {
        let feat = self.backbone_forward(patch, Mode::Eval)?;
        let out = bboxes
            .iter()
            .map(|b| roipool(&feat, 0, b).map(|(v, _)| v))
            .collect();
        self.clear_cache();
        out
    }

    /// Drop cached activations held for backward passes.
    pub fn clear_cache(&mut self) {
        self.stem_act = None;
        self.out_act = None;
        self.out_bn.clear_cache();
        self.stem_conv1.clear_cache();
        self.stem_bn.clear_cache();
        self.stem_conv2.clear_cache();
        self.pool.clear_cache();
        for b in self.blocks.iter_mut() {
            b.clear_cache();
        }
        self.seg_block.clear_cache();
        self.seg_out.clear_cache();
    }

    /// Convert parameter storage to another precision.
    pub fn cast<U: Scalar>(&mut self) -> Result<Network<U>> {
        let mut values: Vec<Vec<f64>> = Vec::new();
        self.visit_params(&mut |_, p| {
            values.push(p.value.iter().map(|v| v.to_f64().unwrap()).collect())
        });
        let mut out = Network::<U>::new(&self.config)?;
        let mut it = values.into_iter();
        out.visit_params(&mut |_, p| {
            let v = it.next().expect("same layout");
            p.value = v.into_iter().map(U::from_f64_lossy).collect();
        });
        Ok(out)
    }
}
