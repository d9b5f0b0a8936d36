use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamVector, RealMatrix};

pub const OUTPUT_WEIGHT: &str = "output.weight";
pub const TOKEN_EMBEDDING: &str = "embed.token";
pub const POSITION_EMBEDDING: &str = "embed.position";

const INIT_SCALE: f64 = 0.02;
const OUTPUT_INIT_SCALE: f64 = 0.002;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArchitecture {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub context_window: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub ffn_dim: usize,
}

impl PolicyArchitecture {
    /// Default shape: width 32, two heads, one block.
    pub fn new(vocab_size: usize, context_window: usize) -> Self {
        Self {
            vocab_size,
            model_dim: 32,
            context_window,
            num_heads: 2,
            num_blocks: 1,
            ffn_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArchitecture(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return bad("model_dim, num_heads and ffn_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            ));
        }
        if self.context_window == 0 || self.num_blocks == 0 {
            return bad("context_window and num_blocks must be positive".into());
        }
        Ok(())
    }

    pub fn block_names(b: usize) -> [String; 8] {
        [
            format!("block{b}.attn.query"),
            format!("block{b}.attn.key"),
            format!("block{b}.attn.value"),
            format!("block{b}.attn.out"),
            format!("block{b}.ffn.in.weight"),
            format!("block{b}.ffn.in.bias"),
            format!("block{b}.ffn.out.weight"),
            format!("block{b}.ffn.out.bias"),
        ]
    }

    /// Segment names and shapes in storage order; the output matrix is last.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let (v, d, f) = (self.vocab_size, self.model_dim, self.ffn_dim);
        let mut out = vec![
            (TOKEN_EMBEDDING.to_string(), v, d),
            (POSITION_EMBEDDING.to_string(), self.context_window, d),
        ];
        for b in 0..self.num_blocks {
            let [q, k, val, o, w1, b1, w2, b2] = Self::block_names(b);
            out.extend([
                (q, d, d),
                (k, d, d),
                (val, d, d),
                (o, d, d),
                (w1, d, f),
                (b1, 1, f),
                (w2, f, d),
                (b2, 1, d),
            ]);
        }
        out.push((OUTPUT_WEIGHT.to_string(), v, d));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, r, c)| r * c).sum()
    }
}

/// Immutable policy parameters `(output matrix, backbone)` plus a version.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySnapshot {
    arch: PolicyArchitecture,
    params: ParamVector,
    version: u64,
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

impl PolicySnapshot {
    /// Standard initialization: zero-mean normal weights at scale 0.02, the
    /// output matrix at 0.002, zero biases.
    pub fn init(arch: PolicyArchitecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sampled(
            arch,
            |name| {
                if is_bias(name) {
                    0.0
                } else if name == OUTPUT_WEIGHT {
                    OUTPUT_INIT_SCALE
                } else {
                    INIT_SCALE
                }
            },
            &mut rng,
        )
    }

    /// Every coordinate (biases included) drawn from N(0, scale²).
    pub fn random(arch: PolicyArchitecture, seed: u64, scale: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sampled(arch, |_| scale, &mut rng)
    }

    fn sampled(
        arch: PolicyArchitecture,
        scale_of: impl Fn(&str) -> f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamVector::new();
        for (name, rows, cols) in arch.layout() {
            let s = scale_of(&name);
            let m = if s == 0.0 {
                RealMatrix::zeros(rows, cols)
            } else {
                let normal = Normal::new(0.0, s)
                    .map_err(|e| Error::InvalidArgument(format!("init scale {s}: {e}")))?;
                RealMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
            };
            params.push(name, m)?;
        }
        Ok(Self {
            arch,
            params,
            version: 0,
        })
    }

    /// Wraps a full parameter vector, checking it against the layout.
    pub fn from_params(
        arch: PolicyArchitecture,
        params: ParamVector,
        version: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != params.num_segments() {
            return Err(Error::ShapeMismatch(format!(
                "{} segments for a layout of {}",
                params.num_segments(),
                layout.len()
            )));
        }
        for ((name, rows, cols), (pn, m)) in layout.iter().zip(params.iter()) {
            if name != pn || m.shape() != (*rows, *cols) {
                return Err(Error::ShapeMismatch(format!(
                    "segment `{pn}` {:?}, expected `{name}` ({rows}, {cols})",
                    m.shape()
                )));
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("snapshot parameters".into()));
        }
        Ok(Self {
            arch,
            params,
            version,
        })
    }

    pub fn arch(&self) -> &PolicyArchitecture {
        &self.arch
    }

    /// Full parameter vector θ, output matrix last.
    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn output_weight(&self) -> &RealMatrix {
        self.params
            .get(OUTPUT_WEIGHT)
            .expect("layout has an output matrix")
    }

    /// Backbone parameters φ (everything except the output matrix).
    pub fn backbone(&self) -> ParamVector {
        self.params.split(&[OUTPUT_WEIGHT]).1
    }

    /// `θ + scale·delta` as a new snapshot with the next version.
    pub fn apply_update(&self, delta: &ParamVector, scale: f64) -> Result<Self> {
        let mut params = self.params.clone();
        params.axpy(scale, delta)?;
        if !params.is_finite() {
            return Err(Error::NonFinite("updated parameters".into()));
        }
        Ok(Self {
            arch: self.arch,
            params,
            version: self.version + 1,
        })
    }

    /// Same parameters under a different version number.
    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    /// Replaces the parameter vector wholesale, bumping the version.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::from_params(self.arch, params, self.version + 1)
    }
}

const MAGIC: &[u8; 8] = b"ERUPSNAP";
const FORMAT_VERSION: u32 = 1;

impl PolicySnapshot {
    /// Flat little-endian container: header, architecture, then named segments.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.dim());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let a = &self.arch;
        for x in [
            a.vocab_size,
            a.model_dim,
            a.context_window,
            a.num_heads,
            a.num_blocks,
            a.ffn_dim,
        ] {
            out.extend_from_slice(&(x as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.params.num_segments() as u32).to_le_bytes());
        for (name, m) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::SnapshotFormat("bad magic".into()));
        }
        let fmt = r.u32()?;
        if fmt != FORMAT_VERSION {
            return Err(Error::SnapshotFormat(format!("unsupported format {fmt}")));
        }
        let arch = PolicyArchitecture {
            vocab_size: r.u64()? as usize,
            model_dim: r.u64()? as usize,
            context_window: r.u64()? as usize,
            num_heads: r.u64()? as usize,
            num_blocks: r.u64()? as usize,
            ffn_dim: r.u64()? as usize,
        };
        let version = r.u64()?;
        let n = r.u32()?;
        let mut params = ParamVector::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::SnapshotFormat("segment name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.saturating_mul(8) <= bytes.len())
                .ok_or_else(|| Error::SnapshotFormat(format!("segment `{name}` too large")))?;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            params.push(name, RealMatrix::new(rows, cols, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::SnapshotFormat("trailing bytes".into()));
        }
        Self::from_params(arch, params, version)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::SnapshotFormat("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let snap = PolicySnapshot::random(PolicyArchitecture::new(10, 8), 4, 0.3)
            .unwrap()
            .with_version(17);
        let back = PolicySnapshot::from_bytes(&snap.to_bytes()).unwrap();
        assert_eq!(back.version(), 17);
        assert_eq!(back.arch(), snap.arch());
        let a: Vec<u64> = snap
            .params()
            .flatten()
            .iter()
            .map(|x| x.to_bits())
            .collect();
        let b: Vec<u64> = back
            .params()
            .flatten()
            .iter()
            .map(|x| x.to_bits())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_container_rejected() {
        let snap = PolicySnapshot::init(PolicyArchitecture::new(4, 4), 0).unwrap();
        let bytes = snap.to_bytes();
        assert!(PolicySnapshot::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(PolicySnapshot::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn init_scales_and_zero_biases() {
        let snap = PolicySnapshot::init(PolicyArchitecture::new(10, 8), 1).unwrap();
        assert!(snap.output_weight().max_abs() < 0.002 * 6.0);
        assert_eq!(
            snap.params()
                .require("block0.ffn.in.bias")
                .unwrap()
                .max_abs(),
            0.0
        );
        assert_eq!(
            snap.backbone().num_segments() + 1,
            snap.params().num_segments()
        );
        assert_eq!(snap.params().dim(), snap.arch().param_count());
    }

    #[test]
    fn architecture_validation() {
        let mut a = PolicyArchitecture::new(10, 8);
        a.num_heads = 3;
        assert!(matches!(a.validate(), Err(Error::InvalidArchitecture(_))));
        a = PolicyArchitecture::new(1, 8);
        assert!(a.validate().is_err());
    }

    #[test]
    fn update_bumps_version_and_rejects_non_finite() {
        let snap = PolicySnapshot::init(PolicyArchitecture::new(4, 4), 0).unwrap();
        let next = snap.apply_update(snap.params(), 1.0).unwrap();
        assert_eq!(next.version(), 1);
        let huge = snap.params().scaled(1e300);
        assert!(snap.apply_update(&huge, 1e300).is_err());
    }
}
