//! Vision-language connectors: spatial downsampling of patch tokens and
//! the 2-layer MLP projections into the decoder embedding space. The probe
//! connector is a second instance with its own disjoint parameters.

use serde::{Deserialize, Serialize};

use crate::nn;
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectorConfig {
    pub vision_dim: usize,
    pub lm_dim: usize,
    /// Spatial pooling factor s; each frame's sqrt(N) x sqrt(N) token grid
    /// is average-pooled in s x s blocks.
    pub downsample: usize,
    pub hidden: usize,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        ConnectorConfig {
            vision_dim: 32,
            lm_dim: 64,
            downsample: 2,
            hidden: 64,
        }
    }
}

impl ConnectorConfig {
    /// Tokens per frame after pooling a grid of `n` tokens.
    pub fn pooled_per_frame(&self, patches_per_frame: usize) -> Result<usize, ModelError> {
        let g = (patches_per_frame as f64).sqrt().round() as usize;
        if g * g != patches_per_frame {
            return Err(ModelError::Config(format!(
                "{patches_per_frame} patch tokens do not form a square grid"
            )));
        }
        if g % self.downsample != 0 {
            return Err(ModelError::Config(format!(
                "grid side {g} not divisible by downsample factor {}",
                self.downsample
            )));
        }
        let gd = g / self.downsample;
        Ok(gd * gd)
    }
}

/// One 2-layer GELU MLP projecting `vision_dim -> lm_dim`, row-wise.
#[derive(Debug, Clone)]
pub struct Connector {
    pub cfg: ConnectorConfig,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Connector {
    pub fn init(
        cfg: &ConnectorConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut Rng,
    ) -> Result<Connector, ModelError> {
        Ok(Connector {
            cfg: cfg.clone(),
            w1: store.add(
                &format!("{prefix}.w1"),
                nn::init_weight(cfg.vision_dim, cfg.hidden, rng).with_grad(),
            )?,
            b1: store.add(&format!("{prefix}.b1"), nn::init_zeros(cfg.hidden).with_grad())?,
            w2: store.add(
                &format!("{prefix}.w2"),
                nn::init_weight(cfg.hidden, cfg.lm_dim, rng).with_grad(),
            )?,
            b2: store.add(&format!("{prefix}.b2"), nn::init_zeros(cfg.lm_dim).with_grad())?,
        })
    }

    pub fn bind(
        cfg: &ConnectorConfig,
        store: &ParamStore,
        prefix: &str,
    ) -> Result<Connector, ModelError> {
        Ok(Connector {
            cfg: cfg.clone(),
            w1: store.id_of(&format!("{prefix}.w1"))?,
            b1: store.id_of(&format!("{prefix}.b1"))?,
            w2: store.id_of(&format!("{prefix}.w2"))?,
            b2: store.id_of(&format!("{prefix}.b2"))?,
        })
    }

    /// Row-wise projection into the language embedding space.
    pub fn project(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, ModelError> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        Ok(nn::mlp2(tape, x, w1, b1, w2, b2)?)
    }
}

/// Non-overlapping s x s average pooling over each frame's spatial grid.
/// Input rows are frame-major then raster order; so is the output.
pub fn spatial_downsample(
    tape: &mut Tape,
    tokens: Var,
    frames: usize,
    factor: usize,
) -> Result<Var, ModelError> {
    let total = tape.shape(tokens)[0];
    let per_frame = total / frames;
    let g = (per_frame as f64).sqrt().round() as usize;
    if g * g != per_frame {
        return Err(ModelError::Config(format!(
            "{per_frame} tokens per frame do not form a square grid"
        )));
    }
    if g % factor != 0 {
        return Err(ModelError::Config(format!(
            "grid side {g} not divisible by downsample factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(tokens);
    }
    let gd = g / factor;
    let pooled_rows = frames * gd * gd;
    let weight = 1.0 / (factor * factor) as f64;
    let mut pool = Tensor::zeros(vec![pooled_rows, total]);
    for t in 0..frames {
        for orow in 0..gd {
            for ocol in 0..gd {
                let out_idx = t * gd * gd + orow * gd + ocol;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let in_idx =
                            t * per_frame + (orow * factor + dy) * g + (ocol * factor + dx);
                        pool.data_mut()[out_idx * total + in_idx] = weight;
                    }
                }
            }
        }
    }
    let pool_var = tape.constant(&pool);
    Ok(tape.matmul(pool_var, tokens)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_identity_when_factor_one() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![4, 2], (0..8).map(|i| i as f64).collect()).unwrap());
        let y = spatial_downsample(&mut tape, x, 1, 1).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn downsample_two_by_two_grid_means() {
        // rows a,b,c,d on a 2x2 grid with s=2 -> single row (a+b+c+d)/4
        let mut tape = Tape::new();
        let x = tape.constant(
            &Tensor::from_vec(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap(),
        );
        let y = spatial_downsample(&mut tape, x, 1, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2]);
        assert_eq!(tape.data(y), &[4.0, 5.0]);
    }

    #[test]
    fn downsample_pools_frames_independently() {
        let mut data = Vec::new();
        for t in 0..2 {
            for i in 0..4 {
                data.push((t * 100 + i) as f64);
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![8, 1], data).unwrap());
        let y = spatial_downsample(&mut tape, x, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.data(y), &[1.5, 101.5]); // frame-major output
    }

    #[test]
    fn downsample_rejects_indivisible_grid() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![9, 2]));
        assert!(matches!(
            spatial_downsample(&mut tape, x, 1, 2),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn zero_connector_projects_to_zero() {
        let cfg = ConnectorConfig {
            vision_dim: 4,
            lm_dim: 6,
            downsample: 1,
            hidden: 5,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from(0);
        let c = Connector::init(&cfg, &mut store, "connector", &mut rng).unwrap();
        for id in [c.w1, c.b1, c.w2, c.b2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![3, 4], vec![1.0; 12]).unwrap());
        let y = c.project(&mut tape, &store, x).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn near_identity_connector_matches_direct_evaluation() {
        // identity w1, identity-scaled w2, small inputs: compare against a
        // plain-loop evaluation of w2 @ gelu(x) (the direct oracle).
        let cfg = ConnectorConfig {
            vision_dim: 3,
            lm_dim: 3,
            downsample: 1,
            hidden: 3,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from(1);
        let c = Connector::init(&cfg, &mut store, "connector", &mut rng).unwrap();
        for (i, v) in store.get_mut(c.w1).data_mut().iter_mut().enumerate() {
            *v = if i % 4 == 0 { 1.0 } else { 0.0 };
        }
        for (i, v) in store.get_mut(c.w2).data_mut().iter_mut().enumerate() {
            *v = if i % 4 == 0 { 1.0 } else { 0.0 };
        }
        store.get_mut(c.b1).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(c.b2).data_mut().iter_mut().for_each(|v| *v = 0.0);

        let xs = [0.01, -0.02, 0.005];
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![1, 3], xs.to_vec()).unwrap());
        let y = c.project(&mut tape, &store, x).unwrap();

        let gelu = |x: f64| {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
        };
        for (got, &input) in tape.data(y).iter().zip(&xs) {
            let want = gelu(input);
            assert!((got - want).abs() < 1e-12);
            assert!((got - input).abs() < 0.02, "near-identity for small inputs");
        }
    }

    #[test]
    fn probe_connector_params_disjoint_from_visual() {
        let cfg = ConnectorConfig::default();
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from(2);
        let c = Connector::init(&cfg, &mut store, "connector", &mut rng).unwrap();
        let cp = Connector::init(&cfg, &mut store, "probe_connector", &mut rng).unwrap();

        let probes = Tensor::randn(vec![16, cfg.vision_dim], 1.0, &mut rng);
        let project = |store: &ParamStore| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.constant(&probes);
            let z = cp.project(&mut tape, store, x).unwrap();
            tape.data(z).to_vec()
        };
        let before = project(&store);
        // perturbing the visual connector must not change probe embeddings
        store.get_mut(c.w1).data_mut()[0] += 10.0;
        store.get_mut(c.w2).data_mut()[3] -= 5.0;
        let after = project(&store);
        assert_eq!(before, after);
        assert_eq!(before.len(), 16 * cfg.lm_dim); // M x d_lm = 16 x 64
    }

    #[test]
    fn token_count_identity() {
        let cfg = ConnectorConfig::default();
        assert_eq!(cfg.pooled_per_frame(16).unwrap(), 4);
        assert!(cfg.pooled_per_frame(15).is_err());
    }
}
