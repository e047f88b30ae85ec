//! Four-level strided conv pyramid standing in for a ResNet backbone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Rng, Tensor};

pub const NUM_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Channels of the first level; level `l` has `base_channels << l`.
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 1,
            base_channels: 8,
            leaky_slope: 0.1,
        }
    }
}

/// Level outputs, each `(N, c << l, H >> (l + 1), W >> (l + 1))`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    weights: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    /// Registers `backbone.l{i}.weight/bias` in `params`.
    pub fn new(config: BackboneConfig, params: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        if config.input_channels == 0 || config.base_channels == 0 {
            return Err(Error::InvalidArgument(
                "backbone channels must be positive".into(),
            ));
        }
        let mut weights = Vec::with_capacity(NUM_LEVELS);
        let mut cin = config.input_channels;
        for l in 0..NUM_LEVELS {
            let cout = config.base_channels << l;
            let w = params.add_glorot(
                format!("backbone.l{l}.weight"),
                &[cout, cin, 4, 4],
                cin * 16,
                cout * 16,
                rng,
            )?;
            let b = params.add_zeros(format!("backbone.l{l}.bias"), &[cout])?;
            weights.push((w, b));
            cin = cout;
        }
        Ok(Backbone { config, weights })
    }

    pub fn level_channels(&self) -> [usize; NUM_LEVELS] {
        std::array::from_fn(|l| self.config.base_channels << l)
    }

    /// Each level is a 4x4 stride-2 conv followed by a leaky ReLU.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        image: NodeId,
    ) -> Result<Vec<NodeId>> {
        let (_, _, h, w) = g.value(image).dims4("backbone_forward")?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Indivisible { h, w, multiple: 16 });
        }
        let mut x = image;
        let mut out = Vec::with_capacity(NUM_LEVELS);
        for &(wid, bid) in &self.weights {
            let wn = g.param(params, wid);
            let bn = g.param(params, bid);
            x = g.conv2d(x, wn, Some(bn), 2, 1)?;
            x = g.leaky_relu(x, self.config.leaky_slope);
            out.push(x);
        }
        Ok(out)
    }

    pub fn forward(&self, params: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let levels = self.forward_graph(&mut g, params, x)?;
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|n| g.value(n).clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_shapes_halve_per_level() {
        let mut params = ParamStore::new();
        let cfg = BackboneConfig {
            base_channels: 32,
            ..BackboneConfig::default()
        };
        let bb = Backbone::new(cfg, &mut params, &mut Rng::new(1)).unwrap();
        let img = Tensor::uniform(vec![1, 1, 160, 128], 1.0, &mut Rng::new(2));
        let pyr = bb.forward(&params, &img).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 32, 80, 64],
                vec![1, 64, 40, 32],
                vec![1, 128, 20, 16],
                vec![1, 256, 10, 8]
            ]
        );
        let again = bb.forward(&params, &img).unwrap();
        assert!(pyr
            .levels
            .iter()
            .zip(&again.levels)
            .all(|(a, b)| a.bitwise_eq(b)));
        assert!(matches!(
            bb.forward(&params, &Tensor::zeros(vec![1, 1, 40, 32])),
            Err(Error::Indivisible { multiple: 16, .. })
        ));
    }
}
