//! Small noise-conditional score networks with an explicit backward pass.
//!
//! The network computes `f_theta(X)` and the score is `f_theta(X) / sigma`.
//! Two architectures are supported:
//!
//! * [`Architecture::Linear`]: elementwise affine head `f(X) = a * X + b`
//!   with one `(a, b)` pair per tensor entry.
//! * [`Architecture::Conv`]: a stack of dilated 3x3 convolutions with SiLU
//!   activations, plus a residual 1x1 linear head from the input. When
//!   `sigma_channel` is set, `ln(sigma)` is appended to the input as a
//!   constant extra channel.
//!
//! Parameters live in one flat `Vec<f64>`; [`ScoreNet::forward_backward`]
//! returns the exact gradient of `0.5 * ||f(X) + target||^2` style losses
//! given the upstream gradient with respect to `f(X)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::tensor::{ImageTensor, Shape};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    /// Image channels seen by the network (input and output).
    pub channels: usize,
    pub features: usize,
    /// One entry per 3x3 layer; the last layer maps back to `channels`.
    pub dilations: Vec<usize>,
    pub sigma_channel: bool,
}

impl ConvSpec {
    /// Four layers, 32 feature maps, dilations 1-2-4-1.
    pub fn default_for(channels: usize) -> Self {
        Self {
            channels,
            features: 32,
            dilations: vec![1, 2, 4, 1],
            sigma_channel: true,
        }
    }

    fn input_channels(&self) -> usize {
        self.channels + usize::from(self.sigma_channel)
    }

    /// `(in, out, dilation)` for every 3x3 layer.
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let n = self.dilations.len();
        self.dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let cin = if i == 0 { self.input_channels() } else { self.features };
                let cout = if i + 1 == n { self.channels } else { self.features };
                (cin, cout, d)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Linear { height: usize, width: usize, channels: usize },
    Conv(ConvSpec),
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Linear { height, width, channels } => {
                ensure_arg!(*height > 0 && *width > 0 && *channels > 0, "linear head needs a positive shape");
            }
            Architecture::Conv(spec) => {
                ensure_arg!(spec.channels > 0, "network channel count must be positive");
                ensure_arg!(spec.features > 0, "feature count must be positive");
                ensure_arg!(!spec.dilations.is_empty(), "at least one convolution layer is required");
                ensure_arg!(spec.dilations.iter().all(|&d| d > 0), "dilations must be positive");
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self {
            Architecture::Linear { height, width, channels } => 2 * height * width * channels,
            Architecture::Conv(spec) => {
                let convs: usize = spec.layers().iter().map(|&(i, o, _)| 9 * i * o + o).sum();
                convs + spec.channels * spec.channels + spec.channels
            }
        }
    }

    /// Shape the network accepts, when fixed.
    pub fn fixed_shape(&self) -> Option<Shape> {
        match self {
            Architecture::Linear { height, width, channels } => Some((*height, *width, *channels)),
            Architecture::Conv(_) => None,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Architecture::Linear { channels, .. } => *channels,
            Architecture::Conv(spec) => spec.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNet {
    arch: Architecture,
    params: Vec<f64>,
}

/// Values cached by the forward pass of one convolution layer.
struct LayerTrace {
    input: Vec<f64>,
    pre_activation: Vec<f64>,
}

impl ScoreNet {
    /// Weights drawn uniformly in `+-1/sqrt(fan_in)`; biases start at zero.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        let mut uniform = |n: usize, fan_in: usize, out: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            out.extend((0..n).map(|_| rng.random_range(-bound..bound)));
        };
        match &arch {
            Architecture::Linear { height, width, channels } => {
                let d = height * width * channels;
                uniform(d, 1, &mut params);
                params.extend(std::iter::repeat_n(0.0, d));
            }
            Architecture::Conv(spec) => {
                for (cin, cout, _) in spec.layers() {
                    uniform(9 * cin * cout, 9 * cin, &mut params);
                    params.extend(std::iter::repeat_n(0.0, cout));
                }
                let c = spec.channels;
                uniform(c * c, c, &mut params);
                params.extend(std::iter::repeat_n(0.0, c));
            }
        }
        debug_assert_eq!(params.len(), arch.param_count());
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        ensure_arg!(
            params.len() == arch.param_count(),
            "expected {} parameters, got {}",
            arch.param_count(),
            params.len()
        );
        ensure_arg!(params.iter().all(|v| v.is_finite()), "parameters must be finite");
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &ImageTensor, sigma: f64) -> Result<()> {
        ensure_arg!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive (got {sigma})");
        match &self.arch {
            Architecture::Linear { height, width, channels } => x.ensure_shape((*height, *width, *channels)),
            Architecture::Conv(spec) => {
                ensure_arg!(
                    x.channels() == spec.channels,
                    "network expects {} channels, got {}",
                    spec.channels,
                    x.channels()
                );
                Ok(())
            }
        }
    }

    /// Raw network output `f_theta(X)` (the score times `sigma`).
    pub fn forward(&self, x: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
        self.check_input(x, sigma)?;
        Ok(match &self.arch {
            Architecture::Linear { .. } => {
                let d = x.len();
                let (a, b) = self.params.split_at(d);
                let data = x.as_slice().iter().zip(a).zip(b).map(|((v, a), b)| a * v + b).collect();
                ImageTensor::from_parts(x.shape(), data)
            }
            Architecture::Conv(spec) => self.conv_forward(spec, x, sigma, None),
        })
    }

    /// Score `f_theta(X) / sigma`.
    pub fn evaluate(&self, x: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
        Ok(self.forward(x, sigma)?.scale(1.0 / sigma))
    }

    /// Runs the forward pass, then accumulates `d(loss)/d(theta)` into
    /// `grad` given `upstream = d(loss)/d(f_theta(X))`.
    pub fn forward_backward(
        &self,
        x: &ImageTensor,
        sigma: f64,
        upstream: impl FnOnce(&ImageTensor) -> ImageTensor,
        grad: &mut [f64],
    ) -> Result<ImageTensor> {
        self.check_input(x, sigma)?;
        ensure_arg!(grad.len() == self.params.len(), "gradient buffer has the wrong length");
        match &self.arch {
            Architecture::Linear { .. } => {
                let out = self.forward(x, sigma)?;
                let g = upstream(&out);
                let d = x.len();
                let (ga, gb) = grad.split_at_mut(d);
                for i in 0..d {
                    ga[i] += g.as_slice()[i] * x.as_slice()[i];
                    gb[i] += g.as_slice()[i];
                }
                Ok(out)
            }
            Architecture::Conv(spec) => {
                let mut traces = Vec::with_capacity(spec.dilations.len());
                let out = self.conv_forward(spec, x, sigma, Some(&mut traces));
                let g = upstream(&out);
                self.conv_backward(spec, x, &traces, g.as_slice(), grad);
                Ok(out)
            }
        }
    }

    fn conv_forward(
        &self,
        spec: &ConvSpec,
        x: &ImageTensor,
        sigma: f64,
        mut traces: Option<&mut Vec<LayerTrace>>,
    ) -> ImageTensor {
        let (h, w, c) = x.shape();
        let mut act = with_sigma_channel(x, spec.sigma_channel, sigma);
        let layers = spec.layers();
        let mut offset = 0;
        for (li, &(cin, cout, dil)) in layers.iter().enumerate() {
            let weights = &self.params[offset..offset + 9 * cin * cout];
            let bias = &self.params[offset + 9 * cin * cout..offset + 9 * cin * cout + cout];
            offset += 9 * cin * cout + cout;
            let pre = conv3x3(&act, h, w, cin, cout, dil, weights, bias);
            let last = li + 1 == layers.len();
            let next = if last { pre.clone() } else { pre.iter().map(|&v| silu(v)).collect() };
            if let Some(t) = traces.as_deref_mut() {
                t.push(LayerTrace {
                    input: std::mem::take(&mut act),
                    pre_activation: pre,
                });
            }
            act = next;
        }
        // residual 1x1 head from the image channels
        let skip_w = &self.params[offset..offset + c * c];
        let skip_b = &self.params[offset + c * c..offset + c * c + c];
        for (o, px) in act.chunks_exact_mut(c).zip(x.as_slice().chunks_exact(c)) {
            for oc in 0..c {
                let row = &skip_w[oc * c..(oc + 1) * c];
                o[oc] += skip_b[oc] + row.iter().zip(px).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        ImageTensor::from_parts((h, w, c), act)
    }

    fn conv_backward(&self, spec: &ConvSpec, x: &ImageTensor, traces: &[LayerTrace], upstream: &[f64], grad: &mut [f64]) {
        let (h, w, c) = x.shape();
        let layers = spec.layers();
        let offsets: Vec<usize> = layers
            .iter()
            .scan(0, |acc, &(cin, cout, _)| {
                let start = *acc;
                *acc += 9 * cin * cout + cout;
                Some(start)
            })
            .collect();
        let skip_offset = offsets.last().unwrap() + {
            let &(cin, cout, _) = layers.last().unwrap();
            9 * cin * cout + cout
        };

        // skip head
        {
            let (gw, rest) = grad[skip_offset..].split_at_mut(c * c);
            let gb = &mut rest[..c];
            for (g, px) in upstream.chunks_exact(c).zip(x.as_slice().chunks_exact(c)) {
                for oc in 0..c {
                    gb[oc] += g[oc];
                    for ic in 0..c {
                        gw[oc * c + ic] += g[oc] * px[ic];
                    }
                }
            }
        }

        let mut delta = upstream.to_vec();
        for li in (0..layers.len()).rev() {
            let (cin, cout, dil) = layers[li];
            let trace = &traces[li];
            if li + 1 != layers.len() {
                for (d, &z) in delta.iter_mut().zip(&trace.pre_activation) {
                    *d *= silu_grad(z);
                }
            }
            let off = offsets[li];
            let weights = &self.params[off..off + 9 * cin * cout];
            let (gw, rest) = grad[off..].split_at_mut(9 * cin * cout);
            let gb = &mut rest[..cout];
            let need_input_grad = li > 0;
            let grad_in = conv3x3_backward(
                &trace.input,
                &delta,
                h,
                w,
                cin,
                cout,
                dil,
                weights,
                gw,
                gb,
                need_input_grad,
            );
            delta = grad_in;
        }
    }
}

fn with_sigma_channel(x: &ImageTensor, enabled: bool, sigma: f64) -> Vec<f64> {
    if !enabled {
        return x.as_slice().to_vec();
    }
    let c = x.channels();
    let level = sigma.ln();
    let mut out = Vec::with_capacity(x.len() / c * (c + 1));
    for px in x.as_slice().chunks_exact(c) {
        out.extend_from_slice(px);
        out.push(level);
    }
    out
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

#[inline]
fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

/// Valid taps `(tap, dr, dc)` skipping ones that fall outside the image.
#[inline]
fn tap_source(r: usize, col: usize, tap: usize, dil: usize, h: usize, w: usize) -> Option<usize> {
    let rr = r as isize + (tap / 3) as isize * dil as isize - dil as isize;
    let cc = col as isize + (tap % 3) as isize * dil as isize - dil as isize;
    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
        None
    } else {
        Some(rr as usize * w + cc as usize)
    }
}

/// Zero-padded dilated 3x3 convolution. Weights are laid out
/// `[tap][out][in]` with taps in row-major order over the 3x3 window.
#[allow(clippy::too_many_arguments)]
fn conv3x3(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    dil: usize,
    weights: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for r in 0..h {
        for col in 0..w {
            let p = r * w + col;
            let o = &mut out[p * cout..(p + 1) * cout];
            o.copy_from_slice(bias);
            for tap in 0..9 {
                let Some(q) = tap_source(r, col, tap, dil, h, w) else {
                    continue;
                };
                let src = &input[q * cin..(q + 1) * cin];
                let wt = &weights[tap * cout * cin..(tap + 1) * cout * cin];
                for (oc, acc) in o.iter_mut().enumerate() {
                    let row = &wt[oc * cin..(oc + 1) * cin];
                    *acc += dot(row, src);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    delta: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    dil: usize,
    weights: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let mut grad_in = if need_input_grad { vec![0.0; h * w * cin] } else { Vec::new() };
    for r in 0..h {
        for col in 0..w {
            let p = r * w + col;
            let d = &delta[p * cout..(p + 1) * cout];
            for (gb, &dv) in grad_b.iter_mut().zip(d) {
                *gb += dv;
            }
            for tap in 0..9 {
                let Some(q) = tap_source(r, col, tap, dil, h, w) else {
                    continue;
                };
                let src = &input[q * cin..(q + 1) * cin];
                let base = tap * cout * cin;
                for (oc, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let gw = &mut grad_w[base + oc * cin..base + (oc + 1) * cin];
                    for (g, &s) in gw.iter_mut().zip(src) {
                        *g += dv * s;
                    }
                    if need_input_grad {
                        let wt = &weights[base + oc * cin..base + (oc + 1) * cin];
                        let gi = &mut grad_in[q * cin..(q + 1) * cin];
                        for (g, &wv) in gi.iter_mut().zip(wt) {
                            *g += dv * wv;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for k in 0..4 {
            s[k] += a[4 * i + k] * b[4 * i + k];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::uniform;

    fn small_conv() -> Architecture {
        Architecture::Conv(ConvSpec {
            channels: 2,
            features: 3,
            dilations: vec![1, 2, 1],
            sigma_channel: true,
        })
    }

    #[test]
    fn param_counts() {
        let a = Architecture::Conv(ConvSpec::default_for(3));
        // 4*9*32 + 32, 9*32*32 + 32 (x2), 9*32*3 + 3, 3*3 + 3
        assert_eq!(a.param_count(), (9 * 4 * 32 + 32) + 2 * (9 * 32 * 32 + 32) + (9 * 32 * 3 + 3) + 12);
        let l = Architecture::Linear { height: 2, width: 3, channels: 1 };
        assert_eq!(l.param_count(), 12);
        assert_eq!(ScoreNet::new(a.clone(), 0).unwrap().params().len(), a.param_count());
    }

    #[test]
    fn init_is_seeded() {
        let a = ScoreNet::new(small_conv(), 7).unwrap();
        let b = ScoreNet::new(small_conv(), 7).unwrap();
        let c = ScoreNet::new(small_conv(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn linear_head_forward() {
        let arch = Architecture::Linear { height: 1, width: 2, channels: 1 };
        let net = ScoreNet::from_params(arch, vec![2.0, -1.0, 0.5, 0.25]).unwrap();
        let x = ImageTensor::new(1, 2, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(net.forward(&x, 0.5).unwrap().as_slice(), &[2.5, -2.75]);
        assert_eq!(net.evaluate(&x, 0.5).unwrap().as_slice(), &[5.0, -5.5]);
        assert!(net.evaluate(&x, 0.0).is_err());
        assert!(net.forward(&ImageTensor::zeros((2, 1, 1)), 1.0).is_err());
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let net = ScoreNet::new(small_conv(), 1).unwrap();
        assert!(net.forward(&ImageTensor::zeros((4, 4, 3)), 1.0).is_err());
        assert!(net.forward(&ImageTensor::zeros((4, 4, 2)), 1.0).is_ok());
    }

    #[test]
    fn conv_is_translation_equivariant_away_from_borders() {
        // a single bright pixel: shifting the input shifts the response
        let net = ScoreNet::new(small_conv(), 3).unwrap();
        let mut a = ImageTensor::zeros((16, 16, 2));
        a.set(7, 7, 0, 1.0);
        let mut b = ImageTensor::zeros((16, 16, 2));
        b.set(8, 7, 0, 1.0);
        let fa = net.forward(&a, 0.3).unwrap();
        let fb = net.forward(&b, 0.3).unwrap();
        for r in 5..10 {
            for c in 5..10 {
                for ch in 0..2 {
                    assert!((fa.get(r, c, ch) - fb.get(r + 1, c, ch)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = ScoreNet::new(small_conv(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = uniform((5, 4, 2), &mut rng);
        let target = uniform((5, 4, 2), &mut rng);
        let loss = |n: &ScoreNet| -> f64 {
            let f = n.forward(&x, 0.4).unwrap();
            0.5 * f.sub(&target).unwrap().norm_sq()
        };
        let mut grad = vec![0.0; net.params().len()];
        net.forward_backward(&x, 0.4, |f| f.sub(&target).unwrap(), &mut grad).unwrap();
        let h = 1e-6;
        for i in 0..net.params().len() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let up = loss(&p);
            p.params_mut()[i] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", grad[i]);
        }
    }
}
