//! Stateful layers. Each forward in training mode caches what its backward
//! needs; backward consumes the cache.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ops;
use crate::param::{Module, Param};
use crate::tensor::Tensor;

/// Forward-pass mode. Training mode carries the RNG used by stochastic
/// layers (dropout, stochastic depth).
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Full convolution over all input channels.
    Dense { k: usize, stride: usize },
    Depthwise { k: usize, stride: usize },
    Pointwise,
}

#[derive(Debug)]
struct ConvBnCache {
    input: Arc<Tensor>,
    xhat: Tensor,
    inv_std: Vec<f32>,
}

/// Convolution (no bias) followed by batch norm and an optional SiLU.
#[derive(Debug)]
pub struct ConvBnAct {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub silu: bool,
    pub weight: Param,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<ConvBnCache>,
}

impl ConvBnAct {
    /// `prefix` follows the torchvision `Conv2dNormActivation` layout:
    /// `{prefix}.0.weight` for the convolution and `{prefix}.1.*` for the norm.
    pub fn new(prefix: &str, kind: ConvKind, cin: usize, cout: usize, silu: bool, rng: &mut impl Rng) -> Self {
        let (wshape, fan_out) = match kind {
            ConvKind::Dense { k, .. } => (vec![cout, cin, k, k], cout * k * k),
            ConvKind::Depthwise { k, .. } => {
                assert_eq!(cin, cout, "depthwise convolution keeps channel count");
                (vec![cout, 1, k, k], k * k)
            }
            ConvKind::Pointwise => (vec![cout, cin, 1, 1], cout),
        };
        Self {
            kind,
            cin,
            cout,
            silu,
            weight: Param::kaiming_normal_fan_out(format!("{prefix}.0.weight"), &wshape, fan_out, rng),
            gamma: Param::filled(format!("{prefix}.1.weight"), &[cout], 1.0),
            beta: Param::filled(format!("{prefix}.1.bias"), &[cout], 0.0),
            running_mean: Param::buffer(format!("{prefix}.1.running_mean"), &[cout], vec![0.0; cout]),
            running_var: Param::buffer(format!("{prefix}.1.running_var"), &[cout], vec![1.0; cout]),
            cache: None,
        }
    }

    fn conv(&self, x: &Tensor) -> Tensor {
        match self.kind {
            ConvKind::Dense { k, stride } => ops::dense_conv_forward(x, &self.weight.value, self.cout, k, stride),
            ConvKind::Depthwise { k, stride } => ops::depthwise_forward(x, &self.weight.value, k, stride),
            ConvKind::Pointwise => ops::pointwise_forward(x, &self.weight.value, self.cout),
        }
    }

    pub fn forward(&mut self, x: Arc<Tensor>, mode: &Mode) -> Tensor {
        assert_eq!(x.channels(), self.cin, "{}: channel mismatch", self.weight.name);
        let mut y = self.conv(&x);
        let c = self.cout;
        let hw = y.plane_len();
        if mode.is_train() {
            let (mean, var) = ops::channel_stats(&y);
            let count = (y.batch() * hw) as f64;
            let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / ((*v as f32) + BN_EPS).sqrt()).collect();
            for ch in 0..c {
                let unbiased = if count > 1.0 { var[ch] * count / (count - 1.0) } else { var[ch] };
                let rm = &mut self.running_mean.value[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch] as f32;
                let rv = &mut self.running_var.value[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
            }
            let mut out = Tensor::zeros(y.shape());
            for (idx, (plane, oplane)) in y
                .data_mut()
                .chunks_mut(hw)
                .zip(out.data_mut().chunks_mut(hw))
                .enumerate()
            {
                let ch = idx % c;
                let (m, s) = (mean[ch] as f32, inv_std[ch]);
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for (v, o) in plane.iter_mut().zip(oplane.iter_mut()) {
                    let xh = (*v - m) * s;
                    *v = xh;
                    let z = g * xh + b;
                    *o = if self.silu { ops::silu(z) } else { z };
                }
            }
            self.cache = Some(ConvBnCache { input: x, xhat: y, inv_std });
            out
        } else {
            self.cache = None;
            for (idx, plane) in y.data_mut().chunks_mut(hw).enumerate() {
                let ch = idx % c;
                let s = 1.0 / (self.running_var.value[ch] + BN_EPS).sqrt();
                let scale = self.gamma.value[ch] * s;
                let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                if self.silu {
                    plane.iter_mut().for_each(|v| *v = ops::silu(*v * scale + shift));
                } else {
                    plane.iter_mut().for_each(|v| *v = *v * scale + shift);
                }
            }
            y
        }
    }

    pub fn backward(&mut self, mut dy: Tensor, need_dx: bool) -> Option<Tensor> {
        let cache = self.cache.take().expect("backward without a training forward");
        let c = self.cout;
        let hw = dy.plane_len();
        let count = (dy.batch() * hw) as f32;
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for (idx, (g, xh)) in dy
            .data_mut()
            .chunks_mut(hw)
            .zip(cache.xhat.data().chunks(hw))
            .enumerate()
        {
            let ch = idx % c;
            let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            let mut sg = 0.0f32;
            let mut sb = 0.0f32;
            for (gv, &x) in g.iter_mut().zip(xh) {
                if self.silu {
                    *gv *= ops::silu_grad(gm * x + bt);
                }
                sg += *gv * x;
                sb += *gv;
            }
            dgamma[ch] += sg as f64;
            dbeta[ch] += sb as f64;
        }
        for (idx, (g, xh)) in dy
            .data_mut()
            .chunks_mut(hw)
            .zip(cache.xhat.data().chunks(hw))
            .enumerate()
        {
            let ch = idx % c;
            let k = self.gamma.value[ch] * cache.inv_std[ch] / count;
            let (dg, db) = (dgamma[ch] as f32, dbeta[ch] as f32);
            for (gv, &x) in g.iter_mut().zip(xh) {
                *gv = k * (count * *gv - db - x * dg);
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += dgamma[ch] as f32;
            self.beta.grad[ch] += dbeta[ch] as f32;
        }
        let x = &cache.input;
        let w = &self.weight.value;
        let dw = &mut self.weight.grad;
        match self.kind {
            ConvKind::Dense { k, stride } => ops::dense_conv_backward(x, w, k, stride, &dy, dw, need_dx),
            ConvKind::Depthwise { k, stride } => ops::depthwise_backward(x, w, k, stride, &dy, dw, need_dx),
            ConvKind::Pointwise => ops::pointwise_backward(x, w, &dy, dw, need_dx),
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Module for ConvBnAct {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([&self.weight, &self.gamma, &self.beta, &self.running_mean, &self.running_var]);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend([
            &mut self.weight,
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]);
    }
}

#[derive(Debug)]
struct SeCache {
    input: Arc<Tensor>,
    pooled: Vec<f32>,
    hidden: Vec<f32>,
    activated: Vec<f32>,
    scale: Vec<f32>,
}

/// Squeeze-and-excitation: channel gates from pooled features.
#[derive(Debug)]
pub struct SqueezeExcite {
    pub channels: usize,
    pub squeeze: usize,
    pub fc1_w: Param,
    pub fc1_b: Param,
    pub fc2_w: Param,
    pub fc2_b: Param,
    cache: Option<SeCache>,
}

impl SqueezeExcite {
    pub fn new(prefix: &str, channels: usize, squeeze: usize, rng: &mut impl Rng) -> Self {
        Self {
            channels,
            squeeze,
            fc1_w: Param::kaiming_normal_fan_out(format!("{prefix}.fc1.weight"), &[squeeze, channels, 1, 1], squeeze, rng),
            fc1_b: Param::filled(format!("{prefix}.fc1.bias"), &[squeeze], 0.0),
            fc2_w: Param::kaiming_normal_fan_out(format!("{prefix}.fc2.weight"), &[channels, squeeze, 1, 1], channels, rng),
            fc2_b: Param::filled(format!("{prefix}.fc2.bias"), &[channels], 0.0),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Arc<Tensor>, mode: &Mode) -> Tensor {
        let n = x.batch();
        let (c, sq) = (self.channels, self.squeeze);
        let pooled = ops::global_avg_pool(&x);
        let hidden = ops::linear_forward(&pooled, &self.fc1_w.value, &self.fc1_b.value, n, c, sq);
        let activated: Vec<f32> = hidden.iter().map(|&v| ops::silu(v)).collect();
        let mut scale = ops::linear_forward(&activated, &self.fc2_w.value, &self.fc2_b.value, n, sq, c);
        scale.iter_mut().for_each(|v| *v = ops::sigmoid(*v));
        let hw = x.plane_len();
        let mut y = Tensor::zeros(x.shape());
        for ((out, inp), s) in y.data_mut().chunks_mut(hw).zip(x.data().chunks(hw)).zip(&scale) {
            for (o, i) in out.iter_mut().zip(inp) {
                *o = i * s;
            }
        }
        self.cache = mode.is_train().then(|| SeCache { input: x, pooled, hidden, activated, scale });
        y
    }

    pub fn backward(&mut self, dy: Tensor) -> Tensor {
        let cache = self.cache.take().expect("backward without a training forward");
        let n = dy.batch();
        let (c, sq) = (self.channels, self.squeeze);
        let hw = dy.plane_len();
        let x = &cache.input;
        // Gradient through the gate value, then through its sigmoid.
        let mut dgate: Vec<f32> = dy
            .data()
            .chunks(hw)
            .zip(x.data().chunks(hw))
            .map(|(g, xi)| g.iter().zip(xi).map(|(a, b)| a * b).sum::<f32>())
            .collect();
        for (d, s) in dgate.iter_mut().zip(&cache.scale) {
            *d *= s * (1.0 - s);
        }
        let mut dact = ops::linear_backward(
            &cache.activated,
            &self.fc2_w.value,
            &dgate,
            n,
            sq,
            c,
            &mut self.fc2_w.grad,
            &mut self.fc2_b.grad,
        );
        for (d, h) in dact.iter_mut().zip(&cache.hidden) {
            *d *= ops::silu_grad(*h);
        }
        let dpooled = ops::linear_backward(
            &cache.pooled,
            &self.fc1_w.value,
            &dact,
            n,
            c,
            sq,
            &mut self.fc1_w.grad,
            &mut self.fc1_b.grad,
        );
        let inv_hw = 1.0 / hw as f32;
        let mut dx = dy;
        for ((g, s), dp) in dx.data_mut().chunks_mut(hw).zip(&cache.scale).zip(&dpooled) {
            let add = dp * inv_hw;
            g.iter_mut().for_each(|v| *v = *v * s + add);
        }
        dx
    }
}

impl Module for SqueezeExcite {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend([&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b]);
    }
}

/// Inverted-residual block: optional 1x1 expansion, depthwise convolution,
/// squeeze-and-excitation, 1x1 projection, and an identity shortcut with
/// per-sample stochastic depth when shapes allow.
#[derive(Debug)]
pub struct MbConv {
    pub expand: Option<ConvBnAct>,
    pub depthwise: ConvBnAct,
    pub se: SqueezeExcite,
    pub project: ConvBnAct,
    pub residual: bool,
    pub drop_prob: f32,
    keep_scale: Option<Vec<f32>>,
}

impl MbConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        cin: usize,
        cout: usize,
        expand_ratio: usize,
        k: usize,
        stride: usize,
        drop_prob: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let expanded = cin * expand_ratio;
        let mut idx = 0;
        let mut next = || {
            let p = format!("{prefix}.block.{idx}");
            idx += 1;
            p
        };
        let expand = (expanded != cin)
            .then(|| ConvBnAct::new(&next(), ConvKind::Pointwise, cin, expanded, true, rng));
        let depthwise = ConvBnAct::new(&next(), ConvKind::Depthwise { k, stride }, expanded, expanded, true, rng);
        let se = SqueezeExcite::new(&next(), expanded, (cin / 4).max(1), rng);
        let project = ConvBnAct::new(&next(), ConvKind::Pointwise, expanded, cout, false, rng);
        Self {
            expand,
            depthwise,
            se,
            project,
            residual: stride == 1 && cin == cout,
            drop_prob,
            keep_scale: None,
        }
    }

    pub fn forward(&mut self, x: Arc<Tensor>, mode: &mut Mode) -> Tensor {
        let h = match self.expand.as_mut() {
            Some(e) => Arc::new(e.forward(Arc::clone(&x), mode)),
            None => Arc::clone(&x),
        };
        let h = Arc::new(self.depthwise.forward(h, mode));
        let h = Arc::new(self.se.forward(h, mode));
        let mut out = self.project.forward(h, mode);
        self.keep_scale = None;
        if self.residual {
            if let Mode::Train(rng) = mode {
                if self.drop_prob > 0.0 {
                    let keep = 1.0 - self.drop_prob;
                    let scales: Vec<f32> = (0..out.batch())
                        .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    for (i, s) in scales.iter().enumerate() {
                        out.sample_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    self.keep_scale = Some(scales);
                }
            }
            for (o, i) in out.data_mut().iter_mut().zip(x.data()) {
                *o += i;
            }
        }
        out
    }

    pub fn backward(&mut self, dy: Tensor, need_dx: bool) -> Option<Tensor> {
        let shortcut = self.residual.then(|| dy.clone());
        let mut dproj = dy;
        if let Some(scales) = self.keep_scale.take() {
            for (i, s) in scales.iter().enumerate() {
                dproj.sample_mut(i).iter_mut().for_each(|v| *v *= s);
            }
        }
        let d = self.project.backward(dproj, true).expect("dx requested");
        let d = self.se.backward(d);
        let has_expand = self.expand.is_some();
        let d = self.depthwise.backward(d, need_dx || has_expand || shortcut.is_some())?;
        let mut dx = match self.expand.as_mut() {
            Some(e) => e.backward(d, need_dx || shortcut.is_some())?,
            None => d,
        };
        if let Some(s) = shortcut {
            for (a, b) in dx.data_mut().iter_mut().zip(s.data()) {
                *a += b;
            }
        }
        need_dx.then_some(dx)
    }

    pub fn clear_cache(&mut self) {
        if let Some(e) = self.expand.as_mut() {
            e.clear_cache();
        }
        self.depthwise.clear_cache();
        self.se.cache = None;
        self.project.clear_cache();
        self.keep_scale = None;
    }
}

impl Module for MbConv {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        if let Some(e) = &self.expand {
            e.collect(out);
        }
        self.depthwise.collect(out);
        self.se.collect(out);
        self.project.collect(out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        if let Some(e) = &mut self.expand {
            e.collect_mut(out);
        }
        self.depthwise.collect_mut(out);
        self.se.collect_mut(out);
        self.project.collect_mut(out);
    }
}
