use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::layers::{avg_pool2, Conv2d, ParamStore};
use crate::tensor::Tensor3;

/// Maps an RGB image in `[0, 1]` to tapped feature maps and a pooled
/// embedding.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> String;

    fn embedding_dim(&self) -> usize;

    fn deterministic(&self) -> bool {
        true
    }

    fn feature_maps(&self, image: &Tensor3<f64>) -> Vec<Tensor3<f64>>;

    fn embed(&self, image: &Tensor3<f64>) -> Vec<f64> {
        self.feature_maps(image)
            .iter()
            .flat_map(|m| {
                let n = m.tokens().max(1) as f64;
                let mut mean = vec![0.0; m.channels];
                for px in m.data.chunks_exact(m.channels) {
                    for (a, &v) in mean.iter_mut().zip(px) {
                        *a += v;
                    }
                }
                mean.into_iter().map(move |v| v / n)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomConvConfig {
    pub channels: Vec<usize>,
    /// Average-pool the input by this factor (a power of two) first.
    pub input_pool: usize,
    pub seed: u64,
}

impl Default for RandomConvConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            input_pool: 1,
            seed: 0,
        }
    }
}

/// Fixed random convolution stack: conv3x3 + ReLU per layer with 2x
/// average pooling between layers; every ReLU output is tapped.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    config: RandomConvConfig,
    params: ParamStore<f64>,
    convs: Vec<Conv2d>,
}

impl RandomConvExtractor {
    pub fn new(config: RandomConvConfig) -> Self {
        assert!(config.input_pool.is_power_of_two(), "input_pool must be a power of two");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        let convs = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&mut params, &format!("feat{i}"), 3, cin, c, 2f64.sqrt(), &mut rng);
                cin = c;
                conv
            })
            .collect();
        Self { config, params, convs }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> String {
        format!(
            "random-conv(channels={:?},pool={},seed={})",
            self.config.channels, self.config.input_pool, self.config.seed
        )
    }

    fn embedding_dim(&self) -> usize {
        self.config.channels.iter().sum()
    }

    fn feature_maps(&self, image: &Tensor3<f64>) -> Vec<Tensor3<f64>> {
        let mut x = image.map(|v| 2.0 * v - 1.0);
        let mut pool = self.config.input_pool;
        while pool > 1 && x.height >= 2 && x.width >= 2 {
            x = avg_pool2(&x);
            pool /= 2;
        }
        let mut taps = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 && x.height >= 2 && x.width >= 2 {
                x = avg_pool2(&x);
            }
            x = conv
                .forward(&self.params, &x)
                .expect("extractor channels are fixed")
                .map(|v| v.max(0.0));
            taps.push(x.clone());
        }
        taps
    }
}
