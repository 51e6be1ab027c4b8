// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::PolicyConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGLN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameter indices of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    /// Relative-position score bias `[heads, window]`, indexed by query-key distance.
    pub rel: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    /// `(kernels [f,c,k,k], bias [f])` per conv layer.
    pub conv: Vec<(usize, usize)>,
    pub embed_w: usize,
    pub embed_b: usize,
    pub blocks: Vec<BlockIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

/// How a parameter is initialized.
#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f32),
}

/// Policy network: conv encoder, causal transformer, factored action heads.
#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub layout: Layout,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn plan(cfg: &PolicyConfig) -> Result<(Builder, Layout)> {
    cfg.validate()?;
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let (d, m, h, w) = (cfg.d_model, cfg.mlp_hidden, cfg.heads, cfg.window);
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f32).sqrt());
    let mut conv = Vec::new();
    let mut c_in = cfg.input_channels;
    for (i, c) in cfg.conv.iter().enumerate() {
        let fan_in = c_in * c.k * c.k;
        let wk = b.add(
            format!("conv{i}.w"),
            vec![c.f, c_in, c.k, c.k],
            Init::Normal((2.0 / fan_in as f32).sqrt()),
        );
        let bk = b.add(format!("conv{i}.b"), vec![c.f], Init::Zeros);
        conv.push((wk, bk));
        c_in = c.f;
    }
    let flat = cfg.flat_features()?;
    let embed_w = b.add("embed.w".into(), vec![flat, d], lin(flat));
    let embed_b = b.add("embed.b".into(), vec![d], Init::Zeros);
    let mut blocks = Vec::new();
    for l in 0..cfg.layers {
        let p = |s: &str| format!("block{l}.{s}");
        blocks.push(BlockIdx {
            ln1_g: b.add(p("ln1.g"), vec![d], Init::Ones),
            ln1_b: b.add(p("ln1.b"), vec![d], Init::Zeros),
            wq: b.add(p("wq"), vec![d, d], lin(d)),
            wk: b.add(p("wk"), vec![d, d], lin(d)),
            wv: b.add(p("wv"), vec![d, d], lin(d)),
            wo: b.add(p("wo"), vec![d, d], lin(d)),
            bo: b.add(p("bo"), vec![d], Init::Zeros),
            rel: b.add(p("rel"), vec![h, w], Init::Zeros),
            ln2_g: b.add(p("ln2.g"), vec![d], Init::Ones),
            ln2_b: b.add(p("ln2.b"), vec![d], Init::Zeros),
            w1: b.add(p("w1"), vec![d, m], lin(d)),
            b1: b.add(p("b1"), vec![m], Init::Zeros),
            w2: b.add(p("w2"), vec![m, d], lin(m)),
            b2: b.add(p("b2"), vec![d], Init::Zeros),
        });
    }
    let lnf_g = b.add("lnf.g".into(), vec![d], Init::Ones);
    let lnf_b = b.add("lnf.b".into(), vec![d], Init::Zeros);
    let head_w = b.add("head.w".into(), vec![d, cfg.n_actions()], Init::Normal(0.02));
    let head_b = b.add("head.b".into(), vec![cfg.n_actions()], Init::Zeros);
    let layout = Layout {
        conv,
        embed_w,
        embed_b,
        blocks,
        lnf_g,
        lnf_b,
        head_w,
        head_b,
    };
    Ok((b, layout))
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::filled(shape, 1.0),
        Init::Normal(std) => {
            let dist = Normal::new(0.0f32, std).expect("finite std");
            Tensor::from_fn(shape, |_| dist.sample(rng))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl Policy {
    /// Seeded random initialization.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        let (b, layout) = plan(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(s, &i)| init_tensor(s, i, &mut rng))
            .collect();
        Ok(Self {
            config,
            names: b.names,
            params,
            layout,
        })
    }

    #[inline]
    pub fn p(&self, i: usize) -> &[f32] {
        self.params[i].data()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Re-draws the parameters whose names start with `prefix`, using the
    /// initializer they were created with.
    pub fn reinit_prefix(&mut self, prefix: &str, seed: u64) -> Result<usize> {
        let (b, _) = plan(&self.config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = 0;
        for (i, name) in b.names.iter().enumerate() {
            if name.starts_with(prefix) {
                // Biases and norms would re-draw to the same constants; give
                // them a small random perturbation so the stage actually changes.
                let t = match b.inits[i] {
                    Init::Normal(_) => init_tensor(&b.shapes[i], b.inits[i], &mut rng),
                    _ => init_tensor(&b.shapes[i], Init::Normal(0.5), &mut rng),
                };
                self.params[i] = t;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (n, t) in self.names.iter().zip(&self.params) {
            t.ensure_finite(n)?;
        }
        Ok(())
    }

    /// Stable content digest of configuration and parameters.
    pub fn digest(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        h.update(serde_json::to_string(&self.config).unwrap_or_default().as_bytes());
        for t in &self.params {
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        format!("{:08x}", h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut offset = 0u64;
        let manifest: Vec<ManifestEntry> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, t)| {
                let e = ManifestEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + config.len() + manifest.len() + offset as usize + 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corruption {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut pos = 8;
        let block = |pos: &mut usize| -> Result<&[u8]> {
            let len_end = *pos + 4;
            let len = u32::from_le_bytes(
                body.get(*pos..len_end)
                    .ok_or_else(|| corrupt("truncated header"))?
                    .try_into()
                    .unwrap(),
            ) as usize;
            let s = body
                .get(len_end..len_end + len)
                .ok_or_else(|| corrupt("truncated header"))?;
            *pos = len_end + len;
            Ok(s)
        };
        let config: PolicyConfig = serde_json::from_slice(block(&mut pos)?)?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(block(&mut pos)?)?;
        let data = &body[pos..];
        let mut policy = Policy::new(config, 0)?;
        if manifest.len() != policy.params.len() {
            return Err(corrupt("parameter count does not match configuration"));
        }
        for (i, e) in manifest.iter().enumerate() {
            if e.name != policy.names[i] || e.shape != policy.params[i].shape() {
                return Err(corrupt(&format!("unexpected parameter '{}'", e.name)));
            }
            let n = policy.params[i].len();
            let start = e.offset as usize;
            let raw = data
                .get(start..start + 4 * n)
                .ok_or_else(|| corrupt("truncated parameter data"))?;
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            policy.params[i] = Tensor::new(e.shape.clone(), vals)?;
        }
        policy.ensure_finite()?;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}
