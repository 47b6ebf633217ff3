//! The tree-structured divergence network and the per-pixel fusion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{leaf_paths, path_label, ModelConfig};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{Graph, ParamStore, Tensor, Var};

/// Smallest LR side accepted by the divergence network.
pub const MIN_INPUT_SIDE: usize = 8;

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
    ) -> Self {
        Conv {
            weight: store.conv_weight(format!("{name}.weight"), co, ci, k, rng),
            bias: store.zeros(format!("{name}.bias"), co),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.conv2d(x, self.weight, self.bias)
    }
}

/// Residual block gated by channel attention.
#[derive(Clone, Debug)]
struct Rcab {
    conv1: Conv,
    conv2: Conv,
    squeeze: Conv,
    excite: Conv,
}

impl Rcab {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let r = c / cfg.reduction;
        Rcab {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), c, c, 3),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), c, c, 3),
            squeeze: Conv::new(store, rng, &format!("{name}.attn_down"), c, r, 1),
            excite: Conv::new(store, rng, &format!("{name}.attn_up"), r, c, 1),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv1.apply(g, x);
        let h = g.relu(h);
        let h = self.conv2.apply(g, h);
        let pooled = g.global_avg_pool(h);
        let a = self.squeeze.apply(g, pooled);
        let a = g.relu(a);
        let a = self.excite.apply(g, a);
        let a = g.sigmoid(a);
        let h = g.scale_channels(h, a);
        g.add(h, x)
    }
}

#[derive(Clone, Debug)]
struct ResidualGroup {
    blocks: Vec<Rcab>,
    tail: Conv,
}

impl ResidualGroup {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        let h = self.tail.apply(g, h);
        g.add(h, x)
    }
}

/// Feature fusion, sub-pixel upscaling and RGB projection for one leaf.
#[derive(Clone, Debug)]
struct LeafHead {
    fuse: Conv,
    upsample: Vec<(Conv, usize)>,
    out: Conv,
}

#[derive(Clone, Debug)]
struct BranchNode {
    groups: Vec<ResidualGroup>,
    children: Vec<BranchNode>,
    head: Option<LeafHead>,
}

/// Tree network mapping one LR image to `branching^tree_depth` SR predictions.
#[derive(Clone, Debug)]
pub struct DivergenceModel {
    config: ModelConfig,
    seed: u64,
    params: ParamStore,
    shallow: Conv,
    roots: Vec<BranchNode>,
}

fn build_node(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    path: &mut Vec<usize>,
) -> BranchNode {
    let c = cfg.channels;
    let name = format!("branch.{}", path_label(path));
    let groups = (0..cfg.residual_groups)
        .map(|gi| ResidualGroup {
            blocks: (0..cfg.blocks_per_group)
                .map(|bi| Rcab::new(store, rng, &format!("{name}.group{gi}.block{bi}"), cfg))
                .collect(),
            tail: Conv::new(store, rng, &format!("{name}.group{gi}.tail"), c, c, 3),
        })
        .collect();
    let (children, head) = if path.len() == cfg.tree_depth {
        let leaf = format!("leaf.{}", path_label(path));
        let head = LeafHead {
            fuse: Conv::new(store, rng, &format!("{leaf}.fuse"), c, c, 3),
            upsample: cfg
                .upsample_stages()
                .into_iter()
                .enumerate()
                .map(|(si, r)| {
                    let conv = Conv::new(store, rng, &format!("{leaf}.up{si}"), c, c * r * r, 3);
                    (conv, r)
                })
                .collect(),
            out: Conv::new(store, rng, &format!("{leaf}.out"), c, 3, 3),
        };
        (Vec::new(), Some(head))
    } else {
        let children = (0..cfg.branching)
            .map(|k| {
                path.push(k);
                let child = build_node(store, rng, cfg, path);
                path.pop();
                child
            })
            .collect();
        (children, None)
    };
    BranchNode {
        groups,
        children,
        head,
    }
}

impl DivergenceModel {
    /// Builds the network with seeded parameters. Parameters are created in
    /// depth-first order so a seed fully determines every value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let shallow = Conv::new(&mut store, &mut rng, "shallow", 3, config.channels, 3);
        let roots = (0..config.branching)
            .map(|k| build_node(&mut store, &mut rng, &config, &mut vec![k]))
            .collect();
        Ok(DivergenceModel {
            config,
            seed,
            params: store,
            shallow,
            roots,
        })
    }

    /// Rebuilds a model from stored parameters; names and shapes must match
    /// what `config` produces.
    pub fn from_params(config: ModelConfig, seed: u64, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        m.params.assign_from(params).map_err(Error::Structure)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Seed the parameters were initialized from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn leaf_paths(&self) -> Vec<Vec<usize>> {
        leaf_paths(self.config.tree_depth, self.config.branching)
    }

    /// Records the forward pass for an `[n, 3, h, w]` batch; returns one
    /// `[n, 3, scale*h, scale*w]` output per leaf in lexicographic order.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let shallow = self.shallow.apply(g, x);
        let mut outs = Vec::with_capacity(self.config.leaves());
        for root in &self.roots {
            self.node_forward(g, root, shallow, shallow, &mut outs);
        }
        outs
    }

    fn node_forward(
        &self,
        g: &mut Graph,
        node: &BranchNode,
        input: Var,
        shallow: Var,
        outs: &mut Vec<Var>,
    ) {
        let mut h = input;
        for group in &node.groups {
            h = group.forward(g, h);
        }
        if self.config.deep_residual {
            h = g.add(h, input);
        }
        match &node.head {
            Some(head) => {
                if self.config.deep_residual {
                    h = g.add(h, shallow);
                }
                let mut u = head.fuse.apply(g, h);
                for (conv, r) in &head.upsample {
                    u = conv.apply(g, u);
                    u = g.pixel_shuffle(u, *r);
                }
                outs.push(head.out.apply(g, u));
            }
            None => {
                for child in &node.children {
                    self.node_forward(g, child, h, shallow, outs);
                }
            }
        }
    }

    /// Runs the network on one LR image. Outputs are clamped to `[0, 1]`.
    pub fn forward(&self, lr: &Image) -> Result<PredictionSet> {
        if lr.height() < MIN_INPUT_SIDE || lr.width() < MIN_INPUT_SIDE {
            return Err(Error::Config(format!(
                "LR input must be at least {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}, got {}x{}",
                lr.height(),
                lr.width()
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(images_to_tensor(&[lr]));
        let outs = self.forward_graph(&mut g, x);
        let preds = outs
            .iter()
            .map(|&v| tensor_to_image(g.value(v), 0, 0).clamped())
            .collect();
        PredictionSet::new(preds, self.leaf_paths())
    }
}

/// Convolutional head producing one softmax-normalized weight plane per
/// prediction.
#[derive(Clone, Debug)]
pub struct ConvergenceModel {
    config: ModelConfig,
    seed: u64,
    params: ParamStore,
    body: Vec<Conv>,
    logits: Conv,
}

impl ConvergenceModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (p, c) = (config.leaves(), config.channels);
        let body = vec![
            Conv::new(&mut store, &mut rng, "fusion.conv0", 3 * p, c, 3),
            Conv::new(&mut store, &mut rng, "fusion.conv1", c, c, 3),
            Conv::new(&mut store, &mut rng, "fusion.conv2", c, c, 3),
        ];
        let logits = Conv::new(&mut store, &mut rng, "fusion.logits", c, p, 1);
        // Zero logits: training starts from the uniform average.
        store.get_mut(logits.weight).data_mut().fill(0.0);
        Ok(ConvergenceModel {
            config,
            seed,
            params: store,
            body,
            logits,
        })
    }

    pub fn from_params(config: ModelConfig, seed: u64, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        m.params.assign_from(params).map_err(Error::Structure)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn input_channels(&self) -> usize {
        3 * self.config.leaves()
    }

    pub fn output_planes(&self) -> usize {
        self.config.leaves()
    }

    /// Records weighting and fusion for `[n, 3P, h, w]` stacked predictions.
    /// Returns `(weights [n, P, h, w], fused [n, 3, h, w])`.
    pub fn forward_graph(&self, g: &mut Graph, stacked: Var) -> (Var, Var) {
        let mut h = stacked;
        for conv in &self.body {
            h = conv.apply(g, h);
            h = g.relu(h);
        }
        let logits = self.logits.apply(g, h);
        let weights = g.softmax_channels(logits);
        let fused = g.fuse(weights, stacked);
        (weights, fused)
    }

    /// Weights the predictions per pixel and returns the maps with the
    /// fused image.
    pub fn forward(&self, preds: &PredictionSet) -> Result<(WeightMaps, Image)> {
        if preds.len() != self.config.leaves() {
            return Err(Error::Structure(format!(
                "fusion head expects {} predictions, got {}",
                self.config.leaves(),
                preds.len()
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(stack_predictions(&[preds]));
        let (w, fused) = self.forward_graph(&mut g, x);
        let wt = g.value(w);
        let (h, wd) = (wt.shape()[2], wt.shape()[3]);
        let planes = wt
            .item(0)
            .chunks_exact(h * wd)
            .map(|p| p.iter().map(|&v| v as f64).collect())
            .collect();
        let maps = WeightMaps {
            height: h,
            width: wd,
            planes,
            leaf_paths: preds.leaf_paths().to_vec(),
        };
        Ok((maps, tensor_to_image(g.value(fused), 0, 0)))
    }
}

/// The ordered predictions of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    predictions: Vec<Image>,
    leaf_paths: Vec<Vec<usize>>,
}

impl PredictionSet {
    /// Checks that all predictions share a size and that the paths are
    /// distinct, equally long and strictly increasing.
    pub fn new(predictions: Vec<Image>, leaf_paths: Vec<Vec<usize>>) -> Result<Self> {
        if predictions.is_empty() || predictions.len() != leaf_paths.len() {
            return Err(Error::Structure(format!(
                "{} predictions with {} leaf paths",
                predictions.len(),
                leaf_paths.len()
            )));
        }
        let dims = predictions[0].dims();
        if predictions.iter().any(|p| p.dims() != dims) {
            return Err(Error::Dimension("predictions differ in size".into()));
        }
        let depth = leaf_paths[0].len();
        if leaf_paths.iter().any(|p| p.len() != depth)
            || leaf_paths.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Structure(
                "leaf paths must share a length and be strictly increasing".into(),
            ));
        }
        Ok(PredictionSet {
            predictions,
            leaf_paths,
        })
    }

    pub fn predictions(&self) -> &[Image] {
        &self.predictions
    }

    pub fn leaf_paths(&self) -> &[Vec<usize>] {
        &self.leaf_paths
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.predictions[0].dims()
    }
}

/// Per-prediction weight planes; at every pixel the weights are a convex
/// combination.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMaps {
    height: usize,
    width: usize,
    planes: Vec<Vec<f64>>,
    leaf_paths: Vec<Vec<usize>>,
}

impl WeightMaps {
    pub fn new(
        height: usize,
        width: usize,
        planes: Vec<Vec<f64>>,
        leaf_paths: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if planes.is_empty()
            || planes.len() != leaf_paths.len()
            || planes.iter().any(|p| p.len() != height * width)
        {
            return Err(Error::Dimension("weight planes do not match geometry".into()));
        }
        Ok(WeightMaps {
            height,
            width,
            planes,
            leaf_paths,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn planes(&self) -> &[Vec<f64>] {
        &self.planes
    }

    pub fn leaf_paths(&self) -> &[Vec<usize>] {
        &self.leaf_paths
    }
}

/// `I_SR = sum_i W_i * I_i`, with each weight plane broadcast over RGB.
pub fn fuse_predictions(preds: &PredictionSet, weights: &WeightMaps) -> Result<Image> {
    if preds.len() != weights.planes.len() {
        return Err(Error::Structure(format!(
            "{} predictions vs {} weight planes",
            preds.len(),
            weights.planes.len()
        )));
    }
    let (h, w) = preds.dims();
    if (h, w) != weights.dims() {
        return Err(Error::Dimension("weights and predictions differ in size".into()));
    }
    let mut out = vec![0.0; h * w * 3];
    for (pred, plane) in preds.predictions.iter().zip(&weights.planes) {
        for ((o, px), &wt) in out.chunks_exact_mut(3).zip(pred.data().chunks_exact(3)).zip(plane) {
            for c in 0..3 {
                o[c] += wt * px[c];
            }
        }
    }
    Image::new(h, w, out)
}

/// Packs images into an `[n, 3, h, w]` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Tensor {
    let (h, w) = images[0].dims();
    let mut t = Tensor::zeros([images.len(), 3, h, w]);
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.dims(), (h, w), "batch images differ in size");
        write_image(t.item_mut(n), img, 0);
    }
    t
}

fn write_image(item: &mut [f32], img: &Image, channel_offset: usize) {
    let hw = img.height() * img.width();
    for (p, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            item[(channel_offset + c) * hw + p] = px[c] as f32;
        }
    }
}

/// Stacks each set's predictions along channels: `[n, 3P, h, w]`.
pub fn stack_predictions(sets: &[&PredictionSet]) -> Tensor {
    let p = sets[0].len();
    let (h, w) = sets[0].dims();
    let mut t = Tensor::zeros([sets.len(), 3 * p, h, w]);
    for (n, set) in sets.iter().enumerate() {
        let item = t.item_mut(n);
        for (k, img) in set.predictions().iter().enumerate() {
            write_image(item, img, 3 * k);
        }
    }
    t
}

/// Reads channels `offset..offset+3` of batch item `n` as an image.
pub fn tensor_to_image(t: &Tensor, n: usize, offset: usize) -> Image {
    let [_, _, h, w] = t.shape();
    let hw = h * w;
    let item = t.item(n);
    let mut data = Vec::with_capacity(hw * 3);
    for p in 0..hw {
        for c in 0..3 {
            data.push(item[(offset + c) * hw + p] as f64);
        }
    }
    Image::new(h, w, data).expect("network outputs are finite")
}
