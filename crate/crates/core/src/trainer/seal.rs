use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::kernels::{sigmoid, vec_mat};
use crate::numerics::{ParamVector, RealMatrix, Tape, Var};

const HIDDEN_WEIGHT: &str = "seal.hidden.weight";
const HIDDEN_BIAS: &str = "seal.hidden.bias";
const OUT_WEIGHT: &str = "seal.out.weight";
const OUT_BIAS: &str = "seal.out.bias";

/// Token classifier `d → d/2 → 1` with tanh hidden units and a logistic output.
#[derive(Clone, Debug, PartialEq)]
pub struct SealHead {
    params: ParamVector,
}

pub struct SealVars {
    hidden_weight: Var,
    hidden_bias: Var,
    out_weight: Var,
    out_bias: Var,
}

impl SealHead {
    pub fn init(model_dim: usize, seed: u64) -> Result<Self> {
        let width = (model_dim / 2).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| -> Result<RealMatrix> {
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt())
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(RealMatrix::from_fn(rows, cols, |_, _| {
                normal.sample(&mut rng)
            }))
        };
        let params = ParamVector::new()
            .with(HIDDEN_WEIGHT, draw(model_dim, width)?)?
            .with(HIDDEN_BIAS, RealMatrix::zeros(1, width))?
            .with(OUT_WEIGHT, draw(width, 1)?)?
            .with(OUT_BIAS, RealMatrix::zeros(1, 1))?;
        Ok(Self { params })
    }

    /// Wraps explicit parameters, checking the four segments and their shapes.
    pub fn from_params(params: ParamVector) -> Result<Self> {
        let w1 = params.require(HIDDEN_WEIGHT)?;
        let (d, width) = w1.shape();
        let expected = [
            (HIDDEN_BIAS, 1, width),
            (OUT_WEIGHT, width, 1),
            (OUT_BIAS, 1, 1),
        ];
        for (name, r, c) in expected {
            if params.require(name)?.shape() != (r, c) {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` for input width {d}"
                )));
            }
        }
        if params.num_segments() != 4 || !params.is_finite() {
            return Err(Error::InvalidArgument("classifier head parameters".into()));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn apply_update(&self, delta: &ParamVector, scale: f64) -> Result<Self> {
        let mut params = self.params.clone();
        params.axpy(scale, delta)?;
        if !params.is_finite() {
            return Err(Error::NonFinite("classifier head update".into()));
        }
        Ok(Self { params })
    }

    /// Probability that `hidden` comes from a correct trajectory.
    pub fn predict(&self, hidden: &[f64]) -> f64 {
        let p = &self.params;
        let w1 = p.require(HIDDEN_WEIGHT).expect("segment");
        let mut u = vec![0.0; w1.cols()];
        vec_mat(hidden, w1.data(), &mut u);
        for (x, b) in u
            .iter_mut()
            .zip(p.require(HIDDEN_BIAS).expect("segment").data())
        {
            *x = (*x + b).tanh();
        }
        let w2 = p.require(OUT_WEIGHT).expect("segment").data();
        let b2 = p.require(OUT_BIAS).expect("segment").item();
        sigmoid(u.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>() + b2)
    }

    pub fn register(&self, tape: &mut Tape) -> Result<SealVars> {
        Ok(SealVars {
            hidden_weight: tape.param(HIDDEN_WEIGHT, self.params.require(HIDDEN_WEIGHT)?)?,
            hidden_bias: tape.param(HIDDEN_BIAS, self.params.require(HIDDEN_BIAS)?)?,
            out_weight: tape.param(OUT_WEIGHT, self.params.require(OUT_WEIGHT)?)?,
            out_bias: tape.param(OUT_BIAS, self.params.require(OUT_BIAS)?)?,
        })
    }
}

impl SealVars {
    /// Pre-sigmoid logits (`T x 1`) for hidden rows `T x d`.
    pub fn record(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let u = tape.matmul(hidden, self.hidden_weight)?;
        let u = tape.add_row(u, self.hidden_bias)?;
        let u = tape.tanh(u);
        let z = tape.matmul(u, self.out_weight)?;
        tape.add_row(z, self.out_bias)
    }
}
