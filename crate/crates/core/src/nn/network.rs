//! Compact U-shaped encoder-decoder producing a per-pixel lesion probability.
//!
//! ```text
//! encoder stage i : [conv3x3 - BN - ReLU] x2 -> (skip) -> maxpool2
//! bottleneck      : conv3x3 - BN - ReLU - dropout
//! decoder stage i : upsample2 -> concat(skip i) -> [conv3x3 - BN - ReLU] x2
//! head            : conv1x1 -> sigmoid
//! ```
//!
//! Inputs whose height or width is not a multiple of `2^stages` are
//! edge-padded on the bottom/right and the output is cropped back.

use super::layers::{
    concat_channels, crop, crop_backward, maxpool2, maxpool2_backward, pad_edge, relu,
    relu_backward, sigmoid, sigmoid_backward, split_channels, upsample_nearest2,
    upsample_nearest2_backward, BatchNorm, BnCache, Conv2d, DropoutMask, Mode,
};
use super::{Scalar, Shape, Tensor4};
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub dropout_prob: f64,
    pub skip_connections: bool,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            bottleneck_channels: 128,
            dropout_prob: 0.5,
            skip_connections: true,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::InvalidArgument("at least one encoder stage is required".into()));
        }
        if self.in_channels == 0
            || self.bottleneck_channels == 0
            || self.stage_channels.contains(&0)
        {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidArgument(format!(
                "dropout_prob must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        if self.bn_epsilon.is_nan() || self.bn_epsilon <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument("invalid batch-norm settings".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this after padding.
    pub fn stride_multiple(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn padded_size(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.stride_multiple();
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }
}

/// conv3x3 → batch norm → ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Clone, Debug)]
struct ConvBnReluTrace<T> {
    input: Tensor4<T>,
    bn: BnCache<T>,
    output: Tensor4<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn new(cin: usize, cout: usize, cfg: &NetworkConfig, rng: &mut RngState) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::he_uniform(cin, cout, 3, rng)?,
            bn: BatchNorm::new(cout, cfg.bn_epsilon, cfg.bn_momentum),
        })
    }

    fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(relu(&self.bn.forward_eval(&self.conv.forward(x)?)?))
    }

    fn forward_train(&self, x: Tensor4<T>) -> Result<ConvBnReluTrace<T>> {
        let z = self.conv.forward(&x)?;
        let (y, bn) = self.bn.forward_train(&z)?;
        Ok(ConvBnReluTrace {
            input: x,
            bn,
            output: relu(&y),
        })
    }

    /// Returns the input gradient; parameter gradients are written to `out`
    /// in [`Network::trainable`] order.
    fn backward(
        &self,
        trace: &ConvBnReluTrace<T>,
        grad: &Tensor4<T>,
        out: &mut Vec<Vec<T>>,
    ) -> Result<Tensor4<T>> {
        let g = relu_backward(&trace.output, grad)?;
        let bn = self.bn.backward(&trace.bn, &g)?;
        let conv = self.conv.backward(&trace.input, &bn.input)?;
        out.push(conv.weight);
        out.push(conv.bias);
        out.push(bn.gamma);
        out.push(bn.beta);
        Ok(conv.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    pub encoder: Vec<[ConvBnRelu<T>; 2]>,
    pub bottleneck: ConvBnRelu<T>,
    /// Decoder stages, deepest first.
    pub decoder: Vec<[ConvBnRelu<T>; 2]>,
    pub head: Conv2d<T>,
}

/// Intermediate values recorded by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    input_hw: (usize, usize),
    padded_hw: (usize, usize),
    encoder: Vec<[ConvBnReluTrace<T>; 2]>,
    pools: Vec<(Shape, Vec<u32>)>,
    bottleneck: ConvBnReluTrace<T>,
    dropout: Option<DropoutMask<T>>,
    decoder: Vec<[ConvBnReluTrace<T>; 2]>,
    upsampled_channels: Vec<usize>,
    head_input: Tensor4<T>,
    probs: Tensor4<T>,
}

/// Parameter gradients in [`Network::trainable`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub Vec<Vec<T>>);

/// Named view of one parameter block.
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [T],
}

fn conv_names(prefix: &str, conv_shape: Vec<usize>, bias: usize) -> [(String, Vec<usize>); 2] {
    [
        (format!("{prefix}.weight"), conv_shape),
        (format!("{prefix}.bias"), vec![bias]),
    ]
}

impl<T: Scalar> Network<T> {
    /// He-uniform initialization driven by `rng`.
    pub fn new(config: NetworkConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for &c in &config.stage_channels {
            encoder.push([
                ConvBnRelu::new(cin, c, &config, rng)?,
                ConvBnRelu::new(c, c, &config, rng)?,
            ]);
            cin = c;
        }
        let bottleneck = ConvBnRelu::new(cin, config.bottleneck_channels, &config, rng)?;
        let mut decoder = Vec::new();
        let mut below = config.bottleneck_channels;
        for &c in config.stage_channels.iter().rev() {
            let cin = if config.skip_connections { below + c } else { below };
            decoder.push([
                ConvBnRelu::new(cin, c, &config, rng)?,
                ConvBnRelu::new(c, c, &config, rng)?,
            ]);
            below = c;
        }
        let head = Conv2d::he_uniform(config.stage_channels[0], 1, 1, rng)?;
        Ok(Network {
            config,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let v = |x: &[T]| x.iter().map(|a| U::from_f64(a.to_f64())).collect::<Vec<U>>();
        let conv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            weight: v(&c.weight),
            bias: v(&c.bias),
        };
        let block = |b: &ConvBnRelu<T>| ConvBnRelu {
            conv: conv(&b.conv),
            bn: BatchNorm {
                gamma: v(&b.bn.gamma),
                beta: v(&b.bn.beta),
                running_mean: v(&b.bn.running_mean),
                running_var: v(&b.bn.running_var),
                eps: b.bn.eps,
                momentum: b.bn.momentum,
            },
        };
        Network {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(|[a, b]| [block(a), block(b)]).collect(),
            bottleneck: block(&self.bottleneck),
            decoder: self.decoder.iter().map(|[a, b]| [block(a), block(b)]).collect(),
            head: conv(&self.head),
        }
    }

    fn blocks(&self) -> Vec<(String, &ConvBnRelu<T>)> {
        let mut out = Vec::new();
        for (i, pair) in self.encoder.iter().enumerate() {
            for (j, b) in pair.iter().enumerate() {
                out.push((format!("enc{i}.block{j}"), b));
            }
        }
        out.push(("bottleneck".to_string(), &self.bottleneck));
        for (i, pair) in self.decoder.iter().enumerate() {
            let stage = self.decoder.len() - 1 - i;
            for (j, b) in pair.iter().enumerate() {
                out.push((format!("dec{stage}.block{j}"), b));
            }
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut ConvBnRelu<T>> {
        let mut out: Vec<&mut ConvBnRelu<T>> = Vec::new();
        for pair in &mut self.encoder {
            out.extend(pair.iter_mut());
        }
        out.push(&mut self.bottleneck);
        for pair in &mut self.decoder {
            out.extend(pair.iter_mut());
        }
        out
    }

    /// Trainable parameters in canonical order: per block conv weight, conv
    /// bias, BN gamma, BN beta; then head weight and bias.
    pub fn trainable(&self) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        for (name, b) in self.blocks() {
            let [w, bias] = conv_names(&format!("{name}.conv"), b.conv.weight_shape(), b.conv.out_channels);
            out.push(ParamView { name: w.0, shape: w.1, values: &b.conv.weight });
            out.push(ParamView { name: bias.0, shape: bias.1, values: &b.conv.bias });
            let c = b.bn.channels();
            out.push(ParamView { name: format!("{name}.bn.gamma"), shape: vec![c], values: &b.bn.gamma });
            out.push(ParamView { name: format!("{name}.bn.beta"), shape: vec![c], values: &b.bn.beta });
        }
        let [w, bias] = conv_names("head", self.head.weight_shape(), 1);
        out.push(ParamView { name: w.0, shape: w.1, values: &self.head.weight });
        out.push(ParamView { name: bias.0, shape: bias.1, values: &self.head.bias });
        out
    }

    /// Trainable and running-statistic handles, each in canonical order.
    fn param_refs_mut(&mut self) -> (Vec<&mut Vec<T>>, Vec<&mut Vec<T>>) {
        let mut trainable: Vec<&mut Vec<T>> = Vec::new();
        let mut stats: Vec<&mut Vec<T>> = Vec::new();
        let Network {
            encoder,
            bottleneck,
            decoder,
            head,
            ..
        } = self;
        let blocks = encoder
            .iter_mut()
            .flat_map(|pair| pair.iter_mut())
            .chain(std::iter::once(bottleneck))
            .chain(decoder.iter_mut().flat_map(|pair| pair.iter_mut()));
        for ConvBnRelu { conv, bn } in blocks {
            trainable.push(&mut conv.weight);
            trainable.push(&mut conv.bias);
            trainable.push(&mut bn.gamma);
            trainable.push(&mut bn.beta);
            stats.push(&mut bn.running_mean);
            stats.push(&mut bn.running_var);
        }
        trainable.push(&mut head.weight);
        trainable.push(&mut head.bias);
        (trainable, stats)
    }

    /// Mutable counterpart of [`Network::trainable`], same order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.param_refs_mut().0
    }

    /// Every stored block: trainable parameters followed by batch-norm
    /// running statistics.
    pub fn all_params(&self) -> Vec<ParamView<'_, T>> {
        let mut out = self.trainable();
        for (name, b) in self.blocks() {
            let c = b.bn.channels();
            out.push(ParamView { name: format!("{name}.bn.running_mean"), shape: vec![c], values: &b.bn.running_mean });
            out.push(ParamView { name: format!("{name}.bn.running_var"), shape: vec![c], values: &b.bn.running_var });
        }
        out
    }

    /// Mutable counterpart of [`Network::all_params`], same order.
    pub fn all_params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let (mut out, stats) = self.param_refs_mut();
        out.extend(stats);
        out
    }

    /// Names of the layers that carry parameters (one per conv/BN block plus
    /// the head), in [`Network::trainable`] order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.blocks().into_iter().map(|(n, _)| n).collect();
        names.push("head".into());
        names
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c() != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                x.c()
            )));
        }
        if x.n() == 0 || x.h() == 0 || x.w() == 0 {
            return Err(Error::ShapeMismatch("empty input".into()));
        }
        Ok(())
    }

    /// Per-pixel probabilities, shape `(n, 1, h, w)`.
    ///
    /// Train mode uses batch statistics and samples a dropout mask from `rng`
    /// but does not update running statistics; use [`Network::forward_train`]
    /// when gradients are needed.
    pub fn forward(&self, x: &Tensor4<T>, mode: Mode, rng: &mut RngState) -> Result<Tensor4<T>> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => self.forward_train(x, rng).map(|(p, _)| p),
        }
    }

    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let (h, w) = (x.h(), x.w());
        let (ph, pw) = self.config.padded_size(h, w);
        let mut cur = pad_edge(x, ph, pw);
        let mut skips = Vec::new();
        for [a, b] in &self.encoder {
            cur = b.forward_eval(&a.forward_eval(&cur)?)?;
            let (pooled, _) = maxpool2(&cur)?;
            skips.push(std::mem::replace(&mut cur, pooled));
        }
        cur = self.bottleneck.forward_eval(&cur)?;
        for [a, b] in &self.decoder {
            let skip = skips.pop().expect("one skip per stage");
            cur = upsample_nearest2(&cur);
            if self.config.skip_connections {
                cur = concat_channels(&cur, &skip)?;
            }
            cur = b.forward_eval(&a.forward_eval(&cur)?)?;
        }
        let probs = sigmoid(&self.head.forward(&cur)?);
        probs.check_finite("network output")?;
        Ok(crop(&probs, h, w))
    }

    pub fn forward_train(&self, x: &Tensor4<T>, rng: &mut RngState) -> Result<(Tensor4<T>, Trace<T>)> {
        self.check_input(x)?;
        let (h, w) = (x.h(), x.w());
        let (ph, pw) = self.config.padded_size(h, w);
        let mut cur = pad_edge(x, ph, pw);
        let mut encoder = Vec::new();
        let mut pools = Vec::new();
        let mut skips = Vec::new();
        for [a, b] in &self.encoder {
            let ta = a.forward_train(cur)?;
            let tb = b.forward_train(ta.output.clone())?;
            let (pooled, arg) = maxpool2(&tb.output)?;
            pools.push((tb.output.shape(), arg));
            skips.push(tb.output.clone());
            encoder.push([ta, tb]);
            cur = pooled;
        }
        let bottleneck = self.bottleneck.forward_train(cur)?;
        let (mut cur, dropout) = if self.config.dropout_prob > 0.0 {
            let mask = DropoutMask::sample(bottleneck.output.len(), self.config.dropout_prob, rng)?;
            (mask.apply(&bottleneck.output)?, Some(mask))
        } else {
            (bottleneck.output.clone(), None)
        };
        let mut decoder = Vec::new();
        let mut upsampled_channels = Vec::new();
        for [a, b] in &self.decoder {
            let skip = skips.pop().expect("one skip per stage");
            let up = upsample_nearest2(&cur);
            upsampled_channels.push(up.c());
            let joined = if self.config.skip_connections {
                concat_channels(&up, &skip)?
            } else {
                up
            };
            let ta = a.forward_train(joined)?;
            let tb = b.forward_train(ta.output.clone())?;
            cur = tb.output.clone();
            decoder.push([ta, tb]);
        }
        let probs = sigmoid(&self.head.forward(&cur)?);
        probs.check_finite("network output")?;
        let out = crop(&probs, h, w);
        Ok((
            out,
            Trace {
                input_hw: (h, w),
                padded_hw: (ph, pw),
                encoder,
                pools,
                bottleneck,
                dropout,
                decoder,
                upsampled_channels,
                head_input: cur,
                probs,
            },
        ))
    }

    /// Parameter gradients given dL/d(probabilities) for the cropped output.
    pub fn backward(&self, trace: &Trace<T>, grad_probs: &Tensor4<T>) -> Result<Gradients<T>> {
        let (h, w) = trace.input_hw;
        grad_probs.ensure_shape((trace.probs.n(), 1, h, w), "network backward")?;
        let (ph, pw) = trace.padded_hw;
        let g = crop_backward(grad_probs, ph, pw);
        let g = sigmoid_backward(&trace.probs, &g)?;
        let head = self.head.backward(&trace.head_input, &g)?;

        // Gradients are produced back to front; blocks are collected per
        // section and reordered at the end.
        let mut decoder_grads: Vec<Vec<Vec<T>>> = Vec::new();
        let mut skip_grads: Vec<Tensor4<T>> = Vec::new();
        let mut g = head.input;
        for (i, [a, b]) in self.decoder.iter().enumerate().rev() {
            let [ta, tb] = &trace.decoder[i];
            let mut gb = Vec::new();
            let gx = b.backward(tb, &g, &mut gb)?;
            let mut ga = Vec::new();
            let gx = a.backward(ta, &gx, &mut ga)?;
            ga.extend(gb);
            decoder_grads.push(ga);
            let gup = if self.config.skip_connections {
                let (gup, gskip) = split_channels(&gx, trace.upsampled_channels[i])?;
                skip_grads.push(gskip);
                gup
            } else {
                gx
            };
            g = upsample_nearest2_backward(&gup)?;
        }
        decoder_grads.reverse();

        if let Some(mask) = &trace.dropout {
            g = mask.apply(&g)?;
        }
        let mut bottleneck_grads = Vec::new();
        g = self.bottleneck.backward(&trace.bottleneck, &g, &mut bottleneck_grads)?;

        // Decoders were walked shallowest-first, so skip_grads[i] belongs to
        // encoder stage i.
        let mut encoder_grads: Vec<Vec<Vec<T>>> = Vec::new();
        for (i, [a, b]) in self.encoder.iter().enumerate().rev() {
            let [ta, tb] = &trace.encoder[i];
            let (shape, arg) = &trace.pools[i];
            let mut gpool = maxpool2_backward(*shape, arg, &g)?;
            if self.config.skip_connections {
                let gs = &skip_grads[i];
                gs.ensure_shape(gpool.shape(), "skip gradient")?;
                gpool.data_mut().iter_mut().zip(gs.data()).for_each(|(a, &b)| *a += b);
            }
            let mut gb = Vec::new();
            let gx = b.backward(tb, &gpool, &mut gb)?;
            let mut ga = Vec::new();
            g = a.backward(ta, &gx, &mut ga)?;
            ga.extend(gb);
            encoder_grads.push(ga);
        }
        encoder_grads.reverse();

        let mut all = Vec::new();
        all.extend(encoder_grads.into_iter().flatten());
        all.extend(bottleneck_grads);
        all.extend(decoder_grads.into_iter().flatten());
        all.push(head.weight);
        all.push(head.bias);
        Ok(Gradients(all))
    }

    /// Folds the batch statistics recorded in `trace` into the running
    /// statistics of every batch-norm layer.
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        let mut caches: Vec<&BnCache<T>> = Vec::new();
        for pair in &trace.encoder {
            caches.extend(pair.iter().map(|t| &t.bn));
        }
        caches.push(&trace.bottleneck.bn);
        for pair in &trace.decoder {
            caches.extend(pair.iter().map(|t| &t.bn));
        }
        for (block, cache) in self.blocks_mut().into_iter().zip(caches) {
            block.bn.update_running(cache);
        }
    }
}
