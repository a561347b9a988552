//! Convolution and GDN layers: parameter registration, initialization, and
//! forward wiring into the graph.

use rand::Rng;

use crate::error::Result;
use crate::nn::{Graph, NodeId, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2-D (optionally transposed) convolution layer. Weight layout is
/// `[out_ch, in_ch, k, k]`; output spatial dims follow the standard
/// (transposed-)convolution arithmetic for the stored stride/padding.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvLayer {
    /// Registers weight/bias under `<name>.w` / `<name>.b`. `weight_scale`
    /// multiplies the fan-in uniform init; zero gives a zero-initialized
    /// layer (used for residual heads and coupling outputs).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        transposed: bool,
        weight_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (in_ch * ksize * ksize) as f64;
        let limit = weight_scale * (6.0 / fan_in).sqrt();
        let n = out_ch * in_ch * ksize * ksize;
        let data: Vec<T> = (0..n)
            .map(|_| {
                if limit == 0.0 {
                    T::zero()
                } else {
                    T::from_f64(rng.gen_range(-limit..limit))
                }
            })
            .collect();
        let weight =
            store.register(&format!("{name}.w"), Tensor::new([out_ch, in_ch, ksize, ksize], data)?)?;
        let bias = store.register(&format!("{name}.b"), Tensor::zeros([1, out_ch, 1, 1]))?;
        Ok(ConvLayer { weight, bias, in_ch, out_ch, ksize, stride, padding, transposed })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv(x, w, b, self.stride, self.padding, self.transposed)
    }
}

/// Generalized divisive normalization. Beta is stored softplus-
/// reparameterized so the effective beta stays strictly positive; gamma is
/// stored as raw values whose square is the effective (non-negative) gamma.
#[derive(Clone, Debug)]
pub struct GdnLayer {
    pub beta_raw: ParamId,
    pub gamma_raw: ParamId,
    pub channels: usize,
    pub inverse: bool,
}

impl GdnLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        inverse: bool,
    ) -> Result<Self> {
        // softplus(0.5413) ~= 1.0
        let beta0 = T::from_f64((std::f64::consts::E - 1.0).ln());
        let beta_raw =
            store.register(&format!("{name}.beta"), Tensor::full([1, channels, 1, 1], beta0))?;
        let mut gamma = Tensor::zeros([channels, channels, 1, 1]);
        for i in 0..channels {
            for j in 0..channels {
                let v = if i == j { 0.1f64.sqrt() } else { 0.01 };
                gamma.data_mut()[i * channels + j] = T::from_f64(v);
            }
        }
        let gamma_raw = store.register(&format!("{name}.gamma"), gamma)?;
        Ok(GdnLayer { beta_raw, gamma_raw, channels, inverse })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let br = g.param(store, self.beta_raw);
        let gr = g.param(store, self.gamma_raw);
        g.gdn(x, br, gr, self.inverse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn gdn_layer_initial_effective_parameters() {
        let mut store = ParamStore::<f64>::new();
        let l = GdnLayer::new(&mut store, "g", 3, false).unwrap();
        let beta0 = store.value(l.beta_raw).data()[0];
        assert!(((1.0 + beta0.exp()).ln() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_conv_outputs_bias() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let l = ConvLayer::new(&mut store, "c", 2, 3, 3, 1, 1, false, 0.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full([1, 2, 4, 4], 5.0));
        let y = l.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
