//! The patch quality model.
//!
//! Each patch feeds two point branches: a structure branch on a sparse random
//! subsample and a texture branch on the dense neighborhood of the patch
//! center. Each branch stacks two sampling/grouping/PointNet layers and adds a
//! strided convolution over the raw points. Branch features are pooled over
//! points, fused, and mapped to a per-patch weight and score; the cloud score
//! is the mean of their products.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{knn, random_sample, KdTree, PatchConfig, PatchSet};
use crate::seed;
use crate::tensor::{BnMode, BnStats, Graph, LayerParams, ReduceKind, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const ELU_ALPHA: f64 = 1.0;
pub const WEIGHT_FILE_VERSION: u16 = 1;

const WEIGHT_MAGIC: &[u8; 4] = b"PSTW";
const SFE_SAMPLE_TAG: u64 = 77;
const INIT_TAG: u64 = 0x1417;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgpConfig {
    pub n_out: usize,
    pub k: usize,
    pub d_out: usize,
    pub mlp_widths: Vec<usize>,
    pub conv_groups: usize,
}

impl SgpConfig {
    pub fn first() -> Self {
        Self {
            n_out: 512,
            k: 32,
            d_out: 128,
            mlp_widths: vec![64, 64, 128],
            conv_groups: 4,
        }
    }

    pub fn second() -> Self {
        Self {
            n_out: 256,
            k: 32,
            d_out: 128,
            mlp_widths: vec![128, 128, 128],
            conv_groups: 4,
        }
    }

    fn validate(&self, name: &str, incoming: usize, c_in: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("{name}: {m}")));
        if self.n_out == 0 || self.k == 0 || self.conv_groups == 0 || self.mlp_widths.is_empty() {
            return bad("n_out, k, conv_groups and mlp_widths must be positive".into());
        }
        if self.n_out > incoming || self.k > incoming {
            return bad(format!(
                "n_out {} and k {} must not exceed the {incoming} incoming points",
                self.n_out, self.k
            ));
        }
        if self.mlp_widths.last() != Some(&self.d_out) {
            return bad("last mlp width must equal d_out".into());
        }
        let mut prev = 3 + c_in;
        for (j, &w) in self.mlp_widths.iter().enumerate() {
            if w == 0 {
                return bad("mlp widths must be positive".into());
            }
            if j > 0 && (!prev.is_multiple_of(self.conv_groups) || w % self.conv_groups != 0) {
                return bad(format!("width {prev}->{w} not divisible by {} groups", self.conv_groups));
            }
            prev = w;
        }
        Ok(())
    }
}

impl Default for SgpConfig {
    fn default() -> Self {
        Self::first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    #[serde(rename = "GMP")]
    Gmp,
    #[serde(rename = "GAP")]
    Gap,
    #[serde(rename = "GVP")]
    Gvp,
    #[serde(rename = "GAP+GVP")]
    GapGvp,
    #[serde(rename = "GMP+GVP")]
    GmpGvp,
}

impl Pooling {
    pub const ALL: [Pooling; 5] = [
        Pooling::Gmp,
        Pooling::Gap,
        Pooling::Gvp,
        Pooling::GapGvp,
        Pooling::GmpGvp,
    ];

    pub fn reductions(self) -> &'static [ReduceKind] {
        match self {
            Pooling::Gmp => &[ReduceKind::Max],
            Pooling::Gap => &[ReduceKind::Mean],
            Pooling::Gvp => &[ReduceKind::Variance],
            Pooling::GapGvp => &[ReduceKind::Mean, ReduceKind::Variance],
            Pooling::GmpGvp => &[ReduceKind::Max, ReduceKind::Variance],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patches per cloud.
    pub k: usize,
    /// Points per patch.
    pub np: usize,
    /// Structure-branch input size.
    pub ns: usize,
    /// Texture-branch input size.
    pub nt: usize,
    pub sgp1: SgpConfig,
    #[serde(default = "SgpConfig::second")]
    pub sgp2: SgpConfig,
    pub side_branch_channels: usize,
    pub fused_width: usize,
    pub pooling: Pooling,
    pub use_tfe: bool,
    pub use_sfe: bool,
    pub use_lbe_weights: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 16,
            np: 14900,
            ns: 1024,
            nt: 8192,
            sgp1: SgpConfig::first(),
            sgp2: SgpConfig::second(),
            side_branch_channels: 128,
            fused_width: 512,
            pooling: Pooling::Gvp,
            use_tfe: true,
            use_sfe: true,
            use_lbe_weights: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Sfe,
    Tfe,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Sfe => "sfe",
            Branch::Tfe => "tfe",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Branch::Sfe => 1,
            Branch::Tfe => 2,
        }
    }
}

impl ModelConfig {
    /// Two tiny patches and narrow layers; small enough for finite differences.
    pub fn toy() -> Self {
        Self {
            k: 2,
            np: 64,
            ns: 16,
            nt: 32,
            sgp1: SgpConfig {
                n_out: 8,
                k: 4,
                d_out: 8,
                mlp_widths: vec![4, 8],
                conv_groups: 2,
            },
            sgp2: SgpConfig {
                n_out: 4,
                k: 4,
                d_out: 8,
                mlp_widths: vec![8, 8],
                conv_groups: 2,
            },
            side_branch_channels: 4,
            fused_width: 8,
            ..Self::default()
        }
    }

    /// A scaled-down network that trains in seconds per epoch on a CPU.
    pub fn compact() -> Self {
        Self {
            k: 4,
            np: 512,
            ns: 128,
            nt: 256,
            sgp1: SgpConfig {
                n_out: 64,
                k: 8,
                d_out: 32,
                mlp_widths: vec![16, 16, 32],
                conv_groups: 4,
            },
            sgp2: SgpConfig {
                n_out: 32,
                k: 8,
                d_out: 32,
                mlp_widths: vec![32, 32],
                conv_groups: 4,
            },
            side_branch_channels: 32,
            fused_width: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_tfe && !self.use_sfe {
            return Err(Error::InvalidConfig("at least one of use_tfe/use_sfe must be set".into()));
        }
        if self.k == 0 || self.np == 0 || self.side_branch_channels == 0 || self.fused_width == 0 {
            return Err(Error::InvalidConfig(
                "k, np, side_branch_channels and fused_width must be positive".into(),
            ));
        }
        for b in self.branches() {
            let nb = self.branch_len(b);
            if nb == 0 || nb > self.np {
                return Err(Error::InvalidConfig(format!(
                    "{} input size {nb} must lie in 1..={}",
                    b.prefix(),
                    self.np
                )));
            }
            if nb < self.sgp2.n_out {
                return Err(Error::InvalidConfig(format!(
                    "{} input size {nb} is below the {} side-branch positions",
                    b.prefix(),
                    self.sgp2.n_out
                )));
            }
            self.sgp1.validate("sgp1", nb, 3)?;
        }
        self.sgp2.validate("sgp2", self.sgp1.n_out, self.sgp1.d_out)?;
        Ok(())
    }

    pub fn branches(&self) -> Vec<Branch> {
        let mut out = Vec::new();
        if self.use_sfe {
            out.push(Branch::Sfe);
        }
        if self.use_tfe {
            out.push(Branch::Tfe);
        }
        out
    }

    pub fn branch_len(&self, b: Branch) -> usize {
        match b {
            Branch::Sfe => self.ns,
            Branch::Tfe => self.nt,
        }
    }

    /// Side-branch kernel width and stride for a branch.
    pub fn side_stride(&self, b: Branch) -> usize {
        (self.branch_len(b) / self.sgp2.n_out).max(1)
    }

    /// Feature width of one branch output.
    pub fn branch_width(&self) -> usize {
        self.sgp2.d_out + self.side_branch_channels
    }

    pub fn pooled_width(&self) -> usize {
        self.branch_width() * self.branches().len() * self.pooling.reductions().len()
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            k: self.k,
            np: self.np,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Weight { fan_in: usize },
    Bias { fan_in: usize },
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl Kind {
    fn trainable(self) -> bool {
        !matches!(self, Kind::RunningMean | Kind::RunningVar)
    }
}

struct ParamShape {
    name: String,
    shape: Vec<usize>,
    kind: Kind,
}

#[derive(Default)]
struct Layout(Vec<ParamShape>);

impl Layout {
    fn conv(&mut self, prefix: &str, out: usize, in_per_group: usize, kw: usize) {
        let fan_in = in_per_group * kw;
        self.0.push(ParamShape {
            name: format!("{prefix}.weight"),
            shape: vec![out, in_per_group, kw],
            kind: Kind::Weight { fan_in },
        });
        self.0.push(ParamShape {
            name: format!("{prefix}.bias"),
            shape: vec![out],
            kind: Kind::Bias { fan_in },
        });
    }

    fn linear(&mut self, prefix: &str, out: usize, fin: usize) {
        self.0.push(ParamShape {
            name: format!("{prefix}.weight"),
            shape: vec![out, fin],
            kind: Kind::Weight { fan_in: fin },
        });
        self.0.push(ParamShape {
            name: format!("{prefix}.bias"),
            shape: vec![out],
            kind: Kind::Bias { fan_in: fin },
        });
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        for (suffix, kind) in [
            ("gamma", Kind::Gamma),
            ("beta", Kind::Beta),
            ("running_mean", Kind::RunningMean),
            ("running_var", Kind::RunningVar),
        ] {
            self.0.push(ParamShape {
                name: format!("{prefix}.{suffix}"),
                shape: vec![c],
                kind,
            });
        }
    }

    fn sgp(&mut self, prefix: &str, cfg: &SgpConfig, c_in: usize) {
        let mut prev = 3 + c_in;
        for (j, &w) in cfg.mlp_widths.iter().enumerate() {
            let groups = if j == 0 { 1 } else { cfg.conv_groups };
            self.conv(&format!("{prefix}.pointnet.conv{j}"), w, prev / groups, 1);
            self.bn(&format!("{prefix}.pointnet.bn{j}"), w);
            prev = w;
        }
    }

    fn of(config: &ModelConfig) -> Self {
        let mut l = Layout::default();
        for b in config.branches() {
            let p = b.prefix();
            l.sgp(&format!("{p}.sgp1"), &config.sgp1, 3);
            l.sgp(&format!("{p}.sgp2"), &config.sgp2, config.sgp1.d_out);
            l.conv(&format!("{p}.side.conv"), config.side_branch_channels, 6, config.side_stride(b));
            l.bn(&format!("{p}.side.bn"), config.side_branch_channels);
        }
        l.linear("cbe.conv", config.fused_width, config.pooled_width());
        l.bn("cbe.bn", config.fused_width);
        if config.use_lbe_weights {
            l.linear("lbe.linear", 1, config.fused_width);
            l.bn("lbe.bn", 1);
        }
        l.linear("score.linear", 1, config.fused_width);
        l
    }
}

/// Trainable scalar count (running statistics excluded).
pub fn param_count(config: &ModelConfig) -> usize {
    Layout::of(config)
        .0
        .iter()
        .filter(|s| s.kind.trainable())
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Trainable scalars per layer, in construction order.
pub fn param_table(config: &ModelConfig) -> Vec<(String, usize)> {
    let mut rows: Vec<(String, usize)> = Vec::new();
    for s in Layout::of(config).0.iter().filter(|s| s.kind.trainable()) {
        let layer = s.name.rsplit_once('.').map_or(s.name.as_str(), |(l, _)| l);
        let n: usize = s.shape.iter().product();
        match rows.last_mut() {
            Some((name, count)) if name == layer => *count += n,
            _ => rows.push((layer.to_string(), n)),
        }
    }
    rows
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Learned parameters plus batch-norm running statistics.
///
/// Every stored value is representable in single precision, so the weight
/// file roundtrips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    params: LayerParams,
}

impl ModelWeights {
    /// Uniform `±1/sqrt(fan_in)` weights and biases; unit scale, zero shift.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, INIT_TAG));
        let mut params = LayerParams::new();
        for s in Layout::of(config).0 {
            let n: usize = s.shape.iter().product();
            let data: Vec<f64> = match s.kind {
                Kind::Weight { fan_in } | Kind::Bias { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| round_f32(rng.gen_range(-bound..bound))).collect()
                }
                Kind::Gamma | Kind::RunningVar => vec![1.0; n],
                Kind::Beta | Kind::RunningMean => vec![0.0; n],
            };
            let t = Tensor::new(s.shape, data)?;
            params.insert(s.name, if s.kind.trainable() { t.with_grad() } else { t })?;
        }
        Ok(Self { params })
    }

    /// All convolution and linear weights and biases zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut w = Self::init(config, 0)?;
        for (name, t) in w.params.iter_mut() {
            if name.ends_with(".weight") || name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(w)
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Rounds every value to the nearest single-precision number.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = round_f32(*v));
        }
    }

    /// Names and shapes must match the layout implied by `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let layout = Layout::of(config);
        if layout.0.len() != self.params.len() {
            return Err(Error::IncompatibleWeights(format!(
                "config expects {} tensors, weights hold {}",
                layout.0.len(),
                self.params.len()
            )));
        }
        for s in &layout.0 {
            let t = self.params.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::IncompatibleWeights(format!(
                    "{} has shape {:?}, config expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 4 && &bytes[..4] != WEIGHT_MAGIC {
            return Err(Error::Format("weight file does not start with PSTW".into()));
        }
        if bytes.len() >= 6 {
            let found = u16::from_le_bytes([bytes[4], bytes[5]]);
            if found != WEIGHT_FILE_VERSION {
                return Err(Error::VersionMismatch {
                    found,
                    expected: WEIGHT_FILE_VERSION,
                });
            }
        }
        if bytes.len() < 14 {
            return Err(Error::ChecksumMismatch("weight file shorter than its header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::ChecksumMismatch("weight file".into()));
        }
        let mut r = Reader { buf: body, pos: 6 };
        let count = r.u32()? as usize;
        let mut params = LayerParams::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::NameMismatch("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(shape, data)?;
            let t = if is_running_stat(&name) { t } else { t.with_grad() };
            params.insert(name, t)?;
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks compatibility with `config`.
    pub fn load_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let w = Self::load(path)?;
        w.check(config)?;
        Ok(w)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("tensor record runs past end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub patch_weights: Vec<f64>,
    pub patch_scores: Vec<f64>,
    pub global_score: f64,
}

static AGG_CHECKS: AtomicU64 = AtomicU64::new(0);
static AGG_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// `(checks, violations)` of the weighted-mean aggregation identity, counted
/// over every forward pass in this process.
pub fn aggregation_checks() -> (u64, u64) {
    (
        AGG_CHECKS.load(Ordering::SeqCst),
        AGG_VIOLATIONS.load(Ordering::SeqCst),
    )
}

/// Recomputes each cloud score from its patch weights and scores.
fn check_aggregation(w: &[f64], y: &[f64], global: &[f64], k: usize) {
    for (c, &g) in global.iter().enumerate() {
        let mut s = 0.0;
        for i in c * k..(c + 1) * k {
            s += w[i] * y[i];
        }
        let expect = s / k as f64;
        AGG_CHECKS.fetch_add(1, Ordering::SeqCst);
        let ok = (g - expect).abs() <= 1e-6 * expect.abs().max(1e-12);
        if !ok || !g.is_finite() {
            AGG_VIOLATIONS.fetch_add(1, Ordering::SeqCst);
        }
    }
}

struct Ctx<'a> {
    g: Graph,
    weights: &'a ModelWeights,
    vars: HashMap<String, Var>,
    train: bool,
    stats: Vec<(String, BnStats)>,
}

impl<'a> Ctx<'a> {
    fn new(weights: &'a ModelWeights, train: bool, track: bool) -> Self {
        Self {
            g: if track { Graph::new() } else { Graph::inference() },
            weights,
            vars: HashMap::new(),
            train,
            stats: Vec::new(),
        }
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.g.param(name, self.weights.params.get(name)?);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.g.linear(x, w, Some(b))
    }

    /// Weight and bias of a convolution followed by batch norm `bn`. In eval
    /// mode the running statistics are folded into them (third field true).
    fn conv_params(&mut self, conv: &str, bn: &str) -> Result<(Var, Var, bool)> {
        if self.train {
            let w = self.p(&format!("{conv}.weight"))?;
            let b = self.p(&format!("{conv}.bias"))?;
            return Ok((w, b, false));
        }
        let p = &self.weights.params;
        let w = p.get(&format!("{conv}.weight"))?;
        let b = p.get(&format!("{conv}.bias"))?.data();
        let gamma = p.get(&format!("{bn}.gamma"))?.data();
        let beta = p.get(&format!("{bn}.beta"))?.data();
        let mean = p.get(&format!("{bn}.running_mean"))?.data();
        let var = p.get(&format!("{bn}.running_var"))?.data();
        let scale: Vec<f64> = gamma
            .iter()
            .zip(var)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let per_out = w.len() / scale.len();
        let wf = w
            .data()
            .chunks_exact(per_out)
            .zip(&scale)
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        let bf = (0..scale.len())
            .map(|c| (b[c] - mean[c]) * scale[c] + beta[c])
            .collect();
        let wf = self.g.constant_from(w.shape(), wf)?;
        let bf = self.g.constant_from(&[scale.len()], bf)?;
        Ok((wf, bf, true))
    }

    /// Batch norm (unless already folded) followed by ELU; consumes `x`.
    fn norm_act(&mut self, x: Var, bn: &str, folded: bool) -> Result<Var> {
        if folded {
            Ok(self.g.elu_consume(x, ELU_ALPHA))
        } else {
            self.bn_elu(x, bn)
        }
    }

    /// Batch norm followed by ELU.
    fn bn_elu(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let weights = self.weights;
        let mode = if self.train {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: weights.params.get(&format!("{prefix}.running_mean"))?.data(),
                var: weights.params.get(&format!("{prefix}.running_var"))?.data(),
            }
        };
        let (y, stats) = self.g.batchnorm(x, gamma, beta, mode, BN_EPS)?;
        if let Some(s) = stats {
            self.stats.push((prefix.to_string(), s));
        }
        self.g.release(x);
        Ok(self.g.elu_consume(y, ELU_ALPHA))
    }

    /// One sampling/grouping/PointNet layer over a batch of point sets.
    ///
    /// `coords[b]` holds the point positions of set `b`; `feats` is `[B, c_in, n_in]`.
    fn sgp(
        &mut self,
        coords: &[Vec<[f64; 3]>],
        feats: Var,
        cfg: &SgpConfig,
        prefix: &str,
        seed: u64,
    ) -> Result<(Vec<Vec<[f64; 3]>>, Var)> {
        let batch = coords.len();
        let n_in = coords[0].len();
        let needed = cfg.n_out.max(cfg.k);
        if n_in < needed {
            return Err(Error::TooFewPoints { needed, got: n_in });
        }
        let c_in = self.g.shape(feats)[1];
        let centers = random_sample(n_in, cfg.n_out, seed);
        let m = cfg.n_out * cfg.k;
        let mut idx = vec![0usize; batch * m];
        let mut rel = vec![0.0; batch * 3 * m];
        let mut out_coords = Vec::with_capacity(batch);
        for (b, pts) in coords.iter().enumerate() {
            let tree = KdTree::new(pts);
            for (ci, &c) in centers.iter().enumerate() {
                for (j, n) in tree.knn(&pts[c], cfg.k)?.into_iter().enumerate() {
                    let col = ci * cfg.k + j;
                    idx[b * m + col] = n;
                    for d in 0..3 {
                        rel[(b * 3 + d) * m + col] = pts[n][d] - pts[c][d];
                    }
                }
            }
            out_coords.push(centers.iter().map(|&c| pts[c]).collect());
        }
        let rel = self.g.constant_from(&[batch, 3, m], rel)?;

        // The first layer acts on (relative xyz ++ features); split by linearity so
        // the feature half runs once per input point rather than once per group slot.
        let (w0, b0, folded) =
            self.conv_params(&format!("{prefix}.pointnet.conv0"), &format!("{prefix}.pointnet.bn0"))?;
        let w_xyz = self.g.narrow(w0, 1, 0, 3)?;
        let w_feat = self.g.narrow(w0, 1, 3, c_in)?;
        let hf = self.g.conv1d(feats, w_feat, None, 1, 1)?;
        self.g.release(feats);
        let hg = self.g.gather(hf, &idx, m)?;
        self.g.release(hf);
        let hx = self.g.conv1d(rel, w_xyz, Some(b0), 1, 1)?;
        self.g.release(rel);
        let h = self.g.add_consume(hg, hx)?;
        self.g.release(hx);
        let mut h = self.norm_act(h, &format!("{prefix}.pointnet.bn0"), folded)?;
        let last = cfg.mlp_widths.len() - 1;
        for j in 1..=last {
            let bn = format!("{prefix}.pointnet.bn{j}");
            let (w, b, folded) = self.conv_params(&format!("{prefix}.pointnet.conv{j}"), &bn)?;
            let c = self.g.conv1d(h, w, Some(b), 1, cfg.conv_groups)?;
            self.g.release(h);
            if j == last && folded {
                // ELU is increasing, so it commutes with the max over neighbours.
                let pooled = self.group_max(c, batch, cfg)?;
                return Ok((out_coords, self.g.elu_consume(pooled, ELU_ALPHA)));
            }
            h = self.norm_act(c, &bn, folded)?;
        }
        Ok((out_coords, self.group_max(h, batch, cfg)?))
    }

    /// Max over the `k` slots of each group; consumes `h`.
    fn group_max(&mut self, h: Var, batch: usize, cfg: &SgpConfig) -> Result<Var> {
        let grouped = self.g.reshape(h, &[batch, cfg.d_out, cfg.n_out, cfg.k])?;
        let pooled = self.g.reduce(grouped, 3, ReduceKind::Max)?;
        self.g.release(h);
        self.g.release(grouped);
        Ok(pooled)
    }

    /// Branch output `[B, d2 + side, N2]` for a batch of `[N_b x 6]` point sets.
    fn branch(
        &mut self,
        sets: &[Vec<[f64; 6]>],
        branch: Branch,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Var> {
        let batch = sets.len();
        let nb = sets[0].len();
        let coords: Vec<Vec<[f64; 3]>> = sets
            .iter()
            .map(|s| s.iter().map(|r| [r[0], r[1], r[2]]).collect())
            .collect();
        let mut raw = vec![0.0; batch * 6 * nb];
        for (b, s) in sets.iter().enumerate() {
            for (i, r) in s.iter().enumerate() {
                for c in 0..6 {
                    raw[(b * 6 + c) * nb + i] = r[c];
                }
            }
        }
        let colors = raw
            .chunks(6 * nb)
            .flat_map(|c| c[3 * nb..].iter().copied())
            .collect();
        let raw = self.g.constant_from(&[batch, 6, nb], raw)?;
        let colors = self.g.constant_from(&[batch, 3, nb], colors)?;

        let p = branch.prefix();
        let tag = 1000 + 10 * branch.tag();
        let (c1, h1) = self.sgp(
            &coords,
            colors,
            &config.sgp1,
            &format!("{p}.sgp1"),
            seed::derive(seed, tag + 1),
        )?;
        let (_, main) = self.sgp(
            &c1,
            h1,
            &config.sgp2,
            &format!("{p}.sgp2"),
            seed::derive(seed, tag + 2),
        )?;

        let s = config.side_stride(branch);
        let bn = format!("{p}.side.bn");
        let (w, b, folded) = self.conv_params(&format!("{p}.side.conv"), &bn)?;
        let conv = self.g.conv1d(raw, w, Some(b), s, 1)?;
        self.g.release(raw);
        let side = self.g.narrow(conv, 2, 0, config.sgp2.n_out)?;
        self.g.release(conv);
        let side = self.norm_act(side, &bn, folded)?;
        self.g.concat(&[main, side], 1)
    }

    /// Pooled per-patch descriptor `[B, P]`.
    fn patch_descriptor(
        &mut self,
        inputs: &BTreeMap<Branch, Vec<Vec<[f64; 6]>>>,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Var> {
        let mut feats = Vec::new();
        for (&b, sets) in inputs {
            feats.push(self.branch(sets, b, config, seed)?);
        }
        let f = self.g.concat(&feats, 1)?;
        let mut pooled = Vec::new();
        for &kind in config.pooling.reductions() {
            pooled.push(self.g.reduce(f, 2, kind)?);
        }
        self.g.concat(&pooled, 1)
    }

    /// Patch weights `[B, 1]`, patch scores `[B, 1]` and cloud scores `[B / k]`.
    fn heads(&mut self, pooled: Var, config: &ModelConfig) -> Result<(Var, Var, Var)> {
        let batch = self.g.shape(pooled)[0];
        let f = self.linear(pooled, "cbe.conv")?;
        let f = self.bn_elu(f, "cbe.bn")?;
        let w = if config.use_lbe_weights {
            let w = self.linear(f, "lbe.linear")?;
            self.bn_elu(w, "lbe.bn")?
        } else {
            self.g.constant_from(&[batch, 1], vec![1.0; batch])?
        };
        let y = self.linear(f, "score.linear")?;
        let wy = self.g.mul(w, y)?;
        let wy = self.g.reshape(wy, &[batch / config.k, config.k])?;
        let global = self.g.reduce(wy, 1, ReduceKind::Mean)?;
        Ok((w, y, global))
    }
}

impl PartialOrd for Branch {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Branch {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.tag().cmp(&other.tag())
    }
}

fn patch_rows(ps: &PatchSet, p: usize) -> Vec<[f64; 6]> {
    ps.patch(p)
        .chunks_exact(6)
        .map(|r| std::array::from_fn(|c| r[c] as f64))
        .collect()
}

/// Branch input point sets for every patch of `ps`.
///
/// The texture branch takes the `nt` points nearest the patch center in
/// ascending distance; the structure branch takes a seeded uniform sample of
/// `ns` points, the same positions for every patch.
pub fn branch_inputs(ps: &PatchSet, branch: Branch, config: &ModelConfig, seed: u64) -> Result<Vec<Vec<[f64; 6]>>> {
    if ps.k() != config.k || ps.np() != config.np {
        return Err(Error::shape(format!(
            "patch set is {}x{}x6, config expects {}x{}x6",
            ps.k(),
            ps.np(),
            config.k,
            config.np
        )));
    }
    let sfe_idx = random_sample(config.np, config.ns, seed::derive(seed, SFE_SAMPLE_TAG));
    (0..ps.k())
        .map(|p| {
            let rows = patch_rows(ps, p);
            let idx = match branch {
                Branch::Sfe => sfe_idx.clone(),
                Branch::Tfe => {
                    let coords: Vec<[f64; 3]> = rows.iter().map(|r| [r[0], r[1], r[2]]).collect();
                    let c = ps.centers()[p];
                    knn(&coords, &[c[0] as f64, c[1] as f64, c[2] as f64], config.nt)?
                }
            };
            Ok(idx.into_iter().map(|i| rows[i]).collect())
        })
        .collect()
}

fn tensor_rows(t: &Tensor, width: usize) -> Result<Vec<[f64; 6]>> {
    if t.shape().len() != 2 || t.shape()[1] != width {
        return Err(Error::shape(format!("expected an N x {width} tensor, got {:?}", t.shape())));
    }
    Ok(t.data()
        .chunks_exact(width)
        .map(|r| std::array::from_fn(|c| r[c]))
        .collect())
}

/// Transposes a `[C, L]` block of a `[B, C, L]` value into `[L, C]`.
fn channels_last(v: &[f64], channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for c in 0..channels {
        for l in 0..len {
            out[l * channels + c] = v[c * len + l];
        }
    }
    out
}

/// Runs one sampling/grouping/PointNet layer on a single point set.
///
/// `input` is `[n_in, 3 + c_in]` (coordinates then features) and the result is
/// `[n_out, 3 + d_out]` (center coordinates then pooled features). `prefix`
/// names the layer's parameters, e.g. `"tfe.sgp1"`.
pub fn sgp_layer(
    input: &Tensor,
    cfg: &SgpConfig,
    weights: &ModelWeights,
    prefix: &str,
    mode: Mode,
    seed: u64,
) -> Result<Tensor> {
    let [n_in, width] = input.shape()[..] else {
        return Err(Error::shape(format!("sgp input must be rank 2, got {:?}", input.shape())));
    };
    if width < 4 {
        return Err(Error::shape("sgp input needs coordinates and at least one feature"));
    }
    let c_in = width - 3;
    let d = input.data();
    let coords: Vec<[f64; 3]> = d.chunks_exact(width).map(|r| [r[0], r[1], r[2]]).collect();
    let mut feats = vec![0.0; c_in * n_in];
    for i in 0..n_in {
        for c in 0..c_in {
            feats[c * n_in + i] = d[i * width + 3 + c];
        }
    }
    let mut ctx = Ctx::new(weights, mode == Mode::Train, false);
    let feats = ctx.g.constant_from(&[1, c_in, n_in], feats)?;
    let (centers, h) = ctx.sgp(&[coords], feats, cfg, prefix, seed)?;
    let hv = channels_last(ctx.g.value(h), cfg.d_out, cfg.n_out);
    let mut out = Vec::with_capacity(cfg.n_out * (3 + cfg.d_out));
    for (i, c) in centers[0].iter().enumerate() {
        out.extend_from_slice(c);
        out.extend_from_slice(&hv[i * cfg.d_out..(i + 1) * cfg.d_out]);
    }
    Tensor::new(vec![cfg.n_out, 3 + cfg.d_out], out)
}

/// Branch features `[N2, d2 + side]` of a single `[N_b, 6]` point set; the
/// first `sgp2.d_out` columns come from the point layers, the rest from the
/// strided side convolution.
pub fn branch_forward(
    patch: &Tensor,
    branch: Branch,
    config: &ModelConfig,
    weights: &ModelWeights,
    mode: Mode,
    seed: u64,
) -> Result<Tensor> {
    config.validate()?;
    weights.check(config)?;
    let rows = tensor_rows(patch, 6)?;
    if rows.len() != config.branch_len(branch) {
        return Err(Error::shape(format!(
            "{} expects {} points, got {}",
            branch.prefix(),
            config.branch_len(branch),
            rows.len()
        )));
    }
    let mut ctx = Ctx::new(weights, mode == Mode::Train, false);
    let f = ctx.branch(&[rows], branch, config, seed)?;
    let data = channels_last(ctx.g.value(f), config.branch_width(), config.sgp2.n_out);
    Tensor::new(vec![config.sgp2.n_out, config.branch_width()], data)
}

/// Scores one patch set with the config's seed.
///
/// In eval mode each patch runs through the branches independently (in
/// parallel) and only the pooled descriptors meet in the fusion heads; in
/// train mode all patches share one pass so batch statistics span the cloud.
pub fn forward(ps: &PatchSet, config: &ModelConfig, weights: &ModelWeights, mode: Mode) -> Result<PredictionBundle> {
    match mode {
        Mode::Train => {
            let pass = forward_train(&[ps], config, weights, config.seed)?;
            Ok(pass.bundles().remove(0))
        }
        Mode::Eval => forward_eval(ps, config, weights),
    }
}

fn forward_eval(ps: &PatchSet, config: &ModelConfig, weights: &ModelWeights) -> Result<PredictionBundle> {
    config.validate()?;
    weights.check(config)?;
    let seed = config.seed;
    let mut inputs = BTreeMap::new();
    for b in config.branches() {
        inputs.insert(b, branch_inputs(ps, b, config, seed)?);
    }
    let pooled: Vec<Vec<f64>> = (0..config.k)
        .into_par_iter()
        .map(|p| {
            let one: BTreeMap<Branch, Vec<Vec<[f64; 6]>>> =
                inputs.iter().map(|(&b, sets)| (b, vec![sets[p].clone()])).collect();
            let mut ctx = Ctx::new(weights, false, false);
            let d = ctx.patch_descriptor(&one, config, seed)?;
            Ok(ctx.g.value(d).to_vec())
        })
        .collect::<Result<_>>()?;
    let width = pooled[0].len();
    let mut ctx = Ctx::new(weights, false, false);
    let x = ctx.g.constant_from(&[config.k, width], pooled.concat())?;
    let (w, y, global) = ctx.heads(x, config)?;
    let bundle = PredictionBundle {
        patch_weights: ctx.g.value(w).to_vec(),
        patch_scores: ctx.g.value(y).to_vec(),
        global_score: ctx.g.value(global)[0],
    };
    check_aggregation(&bundle.patch_weights, &bundle.patch_scores, &[bundle.global_score], config.k);
    Ok(bundle)
}

/// A differentiable train-mode pass over several clouds at once.
pub struct TrainPass {
    pub graph: Graph,
    /// `[C * K, 1]`, cloud-major.
    pub patch_weights: Var,
    /// `[C * K, 1]`, cloud-major.
    pub patch_scores: Var,
    /// `[C]`.
    pub global: Var,
    /// Batch statistics of every batch-norm layer, keyed by layer prefix.
    pub bn_stats: Vec<(String, BnStats)>,
    k: usize,
}

impl TrainPass {
    pub fn bundles(&self) -> Vec<PredictionBundle> {
        let w = self.graph.value(self.patch_weights);
        let y = self.graph.value(self.patch_scores);
        self.graph
            .value(self.global)
            .iter()
            .enumerate()
            .map(|(c, &g)| PredictionBundle {
                patch_weights: w[c * self.k..(c + 1) * self.k].to_vec(),
                patch_scores: y[c * self.k..(c + 1) * self.k].to_vec(),
                global_score: g,
            })
            .collect()
    }

    /// Folds the recorded batch statistics into the running statistics.
    pub fn update_running_stats(&self, weights: &mut ModelWeights) -> Result<()> {
        Self::fold_running_stats(&self.bn_stats, weights)
    }

    /// [`TrainPass::update_running_stats`] for statistics already moved out of a pass.
    pub fn fold_running_stats(stats: &[(String, BnStats)], weights: &mut ModelWeights) -> Result<()> {
        for (prefix, s) in stats {
            let mut mean = weights.params.get(&format!("{prefix}.running_mean"))?.data().to_vec();
            let mut var = weights.params.get(&format!("{prefix}.running_var"))?.data().to_vec();
            s.update_running(&mut mean, &mut var, BN_MOMENTUM);
            for (suffix, v) in [("running_mean", mean), ("running_var", var)] {
                let t = weights
                    .params
                    .get_mut(&format!("{prefix}.{suffix}"))
                    .expect("running stat checked above");
                t.data_mut()
                    .iter_mut()
                    .zip(v)
                    .for_each(|(d, s)| *d = round_f32(s));
            }
        }
        Ok(())
    }
}

/// Builds one graph over every patch of every cloud in `sets`, with batch
/// statistics shared across the whole minibatch.
pub fn forward_train(
    sets: &[&PatchSet],
    config: &ModelConfig,
    weights: &ModelWeights,
    seed: u64,
) -> Result<TrainPass> {
    config.validate()?;
    weights.check(config)?;
    if sets.is_empty() {
        return Err(Error::shape("empty minibatch"));
    }
    let mut inputs: BTreeMap<Branch, Vec<Vec<[f64; 6]>>> = BTreeMap::new();
    for b in config.branches() {
        let mut all = Vec::new();
        for ps in sets {
            all.extend(branch_inputs(ps, b, config, seed)?);
        }
        inputs.insert(b, all);
    }
    let mut ctx = Ctx::new(weights, true, true);
    let pooled = ctx.patch_descriptor(&inputs, config, seed)?;
    let (w, y, global) = ctx.heads(pooled, config)?;
    check_aggregation(ctx.g.value(w), ctx.g.value(y), ctx.g.value(global), config.k);
    Ok(TrainPass {
        graph: ctx.g,
        patch_weights: w,
        patch_scores: y,
        global,
        bn_stats: ctx.stats,
        k: config.k,
    })
}
