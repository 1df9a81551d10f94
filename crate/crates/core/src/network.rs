//! Desk-scale backbone plus the two-branch mean/variance head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{AlumError, Result};
use crate::rng::{tag, RngKey};
use crate::tensor::{DiffArray, Tape, Var};

/// Floor added to the softplus output of the variance branch.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Multiplier on the Glorot bound of the mean and variance branches.
pub const HEAD_INIT_SCALE: f64 = 0.1;

/// `C×H×W` shape of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Grid {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl FromStr for Grid {
    type Err = AlumError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| AlumError::Format(format!("bad grid `{s}`")))?;
        match parts[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Grid::new(c, h, w)),
            _ => Err(AlumError::Format(format!("bad grid `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backbone {
    /// Affine layers whose outputs are viewed as `C×H×W` grids.
    Dense { input_dim: usize, grids: Vec<Grid> },
    /// Same-padded stride-1 convolutions, optional 2×2 max pooling after each.
    Conv {
        input: Grid,
        channels: Vec<usize>,
        kernel: usize,
        pool: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub backbone: Backbone,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    /// `input → 64 → 16×2×2 → 64 → 16×2×2 → head`, the default for vector data.
    pub fn dense(input_dim: usize, hidden: Grid, layers: usize, embed_dim: usize, num_classes: usize) -> Self {
        Architecture {
            backbone: Backbone::Dense {
                input_dim,
                grids: vec![hidden; layers],
            },
            embed_dim,
            num_classes,
        }
    }

    /// Two 3×3 conv layers (8 then 16 channels) with pooling after the first.
    pub fn small_conv(input: Grid, embed_dim: usize, num_classes: usize) -> Self {
        Architecture {
            backbone: Backbone::Conv {
                input,
                channels: vec![8, 16],
                kernel: 3,
                pool: vec![true, false],
            },
            embed_dim,
            num_classes,
        }
    }

    pub fn num_layers(&self) -> usize {
        match &self.backbone {
            Backbone::Dense { grids, .. } => grids.len(),
            Backbone::Conv { channels, .. } => channels.len(),
        }
    }

    pub fn input_len(&self) -> usize {
        match &self.backbone {
            Backbone::Dense { input_dim, .. } => *input_dim,
            Backbone::Conv { input, .. } => input.len(),
        }
    }

    /// Shape of the (pre-activation) feature map of layer `k` (1-based).
    pub fn layer_grid(&self, k: usize) -> Grid {
        match &self.backbone {
            Backbone::Dense { grids, .. } => grids[k - 1],
            Backbone::Conv {
                input, channels, pool, ..
            } => {
                let (mut h, mut w) = (input.height, input.width);
                for p in &pool[..k - 1] {
                    if *p {
                        h /= 2;
                        w /= 2;
                    }
                }
                Grid::new(channels[k - 1], h, w)
            }
        }
    }

    /// Shape of the penultimate features fed to the head.
    pub fn penultimate(&self) -> Grid {
        let n = self.num_layers();
        let g = self.layer_grid(n);
        match &self.backbone {
            Backbone::Conv { pool, .. } if pool[n - 1] => Grid::new(g.channels, g.height / 2, g.width / 2),
            _ => g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AlumError::Config(m));
        if self.embed_dim == 0 || self.num_classes < 2 || self.num_layers() == 0 {
            return bad(format!("degenerate architecture {self:?}"));
        }
        match &self.backbone {
            Backbone::Dense { input_dim, grids } => {
                if *input_dim == 0 || grids.iter().any(|g| g.is_empty()) {
                    return bad("dense backbone needs positive sizes".into());
                }
            }
            Backbone::Conv {
                input,
                channels,
                kernel,
                pool,
            } => {
                if kernel % 2 == 0 || pool.len() != channels.len() || channels.contains(&0) {
                    return bad("conv backbone needs an odd kernel and one pool flag per layer".into());
                }
                let (mut h, mut w) = (input.height, input.width);
                for &p in pool {
                    if p {
                        if h % 2 != 0 || w % 2 != 0 {
                            return bad(format!("cannot pool a {h}×{w} map"));
                        }
                        h /= 2;
                        w /= 2;
                    }
                }
            }
        }
        Ok(())
    }

    /// Flat `key=value` descriptor stored in checkpoints.
    pub fn descriptor(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let mut lines = Vec::new();
        match &self.backbone {
            Backbone::Dense { input_dim, grids } => {
                lines.push("backbone=dense".to_string());
                lines.push(format!("input_dim={input_dim}"));
                lines.push(format!(
                    "grids={}",
                    join(&grids.iter().map(|g| g.to_string()).collect::<Vec<_>>())
                ));
            }
            Backbone::Conv {
                input,
                channels,
                kernel,
                pool,
            } => {
                lines.push("backbone=conv".to_string());
                lines.push(format!("input={input}"));
                lines.push(format!(
                    "channels={}",
                    join(&channels.iter().map(|c| c.to_string()).collect::<Vec<_>>())
                ));
                lines.push(format!("kernel={kernel}"));
                lines.push(format!(
                    "pool={}",
                    join(&pool.iter().map(|&p| (p as u8).to_string()).collect::<Vec<_>>())
                ));
            }
        }
        lines.push(format!("embed_dim={}", self.embed_dim));
        lines.push(format!("num_classes={}", self.num_classes));
        lines.join("\n")
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AlumError::Format(format!("bad descriptor line `{line}`")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| AlumError::Format(format!("descriptor missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| AlumError::Format(format!("descriptor `{k}` is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|p| p.parse().map_err(|_| AlumError::Format(format!("bad list `{k}`"))))
                .collect()
        };
        let backbone = match get("backbone")? {
            "dense" => Backbone::Dense {
                input_dim: num("input_dim")?,
                grids: get("grids")?.split(',').map(str::parse).collect::<Result<_>>()?,
            },
            "conv" => Backbone::Conv {
                input: get("input")?.parse()?,
                channels: list("channels")?,
                kernel: num("kernel")?,
                pool: list("pool")?.into_iter().map(|p| p != 0).collect(),
            },
            other => return Err(AlumError::Format(format!("unknown backbone `{other}`"))),
        };
        let arch = Architecture {
            backbone,
            embed_dim: num("embed_dim")?,
            num_classes: num("num_classes")?,
        };
        arch.validate().map_err(|e| AlumError::Format(e.to_string()))?;
        Ok(arch)
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub array: DiffArray,
}

/// Model parameters plus the architecture they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub params: Vec<Param>,
}

fn uniform(key: RngKey, n: usize, bound: f64) -> Vec<f64> {
    let mut rng = key.rng();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl Network {
    /// Seeded initialization: He-uniform for backbone weights, Glorot-uniform in
    /// the head, zero biases. Both embedding branches start at
    /// [`HEAD_INIT_SCALE`] so early squared distances stay small.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let root = RngKey::root(seed).child(tag::INIT);
        let mut params = Vec::new();
        let mut add = |name: String, group: ParamGroup, shape: &[usize], values: Vec<f64>| -> Result<()> {
            params.push(Param {
                name,
                group,
                array: DiffArray::param(shape, values)?,
            });
            Ok(())
        };
        let mut slot = 0u64;
        let mut next_key = || {
            slot += 1;
            root.child(slot)
        };
        match &arch.backbone {
            Backbone::Dense { input_dim, grids } => {
                let mut fan_in = *input_dim;
                for (k, g) in grids.iter().enumerate() {
                    let out = g.len();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    add(
                        format!("layer{}.weight", k + 1),
                        ParamGroup::Backbone,
                        &[fan_in, out],
                        uniform(next_key(), fan_in * out, bound),
                    )?;
                    add(
                        format!("layer{}.bias", k + 1),
                        ParamGroup::Backbone,
                        &[1, out],
                        vec![0.0; out],
                    )?;
                    fan_in = out;
                }
            }
            Backbone::Conv {
                input,
                channels,
                kernel,
                ..
            } => {
                let mut cin = input.channels;
                for (k, &co) in channels.iter().enumerate() {
                    let n = co * cin * kernel * kernel;
                    let bound = (6.0 / (cin * kernel * kernel) as f64).sqrt();
                    add(
                        format!("layer{}.weight", k + 1),
                        ParamGroup::Backbone,
                        &[co, cin, *kernel, *kernel],
                        uniform(next_key(), n, bound),
                    )?;
                    add(
                        format!("layer{}.bias", k + 1),
                        ParamGroup::Backbone,
                        &[1, co, 1, 1],
                        vec![0.0; co],
                    )?;
                    cin = co;
                }
            }
        }
        let feat = arch.penultimate().len();
        let d = arch.embed_dim;
        let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        add(
            "head.mean.weight".into(),
            ParamGroup::Head,
            &[feat, d],
            uniform(next_key(), feat * d, HEAD_INIT_SCALE * glorot(feat, d)),
        )?;
        add("head.mean.bias".into(), ParamGroup::Head, &[1, d], vec![0.0; d])?;
        add(
            "head.var.weight".into(),
            ParamGroup::Head,
            &[feat, d],
            uniform(next_key(), feat * d, HEAD_INIT_SCALE * glorot(feat, d)),
        )?;
        add("head.var.bias".into(), ParamGroup::Head, &[1, d], vec![0.0; d])?;
        let k = arch.num_classes;
        add(
            "classifier.weight".into(),
            ParamGroup::Head,
            &[k, d],
            uniform(next_key(), k * d, glorot(k, d)),
        )?;
        Ok(Network { arch, params })
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.array.len()).sum()
    }

    /// Register every parameter as a gradient-tracked leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundNetwork<'_> {
        let vars = self.params.iter().map(|p| tape.leaf(p.array.clone())).collect();
        BoundNetwork { net: self, vars }
    }

    /// Register every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundNetwork<'_> {
        let vars = self.params.iter().map(|p| tape.constant(p.array.clone())).collect();
        BoundNetwork { net: self, vars }
    }
}

/// A network whose parameters live on a tape.
pub struct BoundNetwork<'a> {
    pub net: &'a Network,
    pub vars: Vec<Var>,
}

/// Hook applied to each layer's pre-activation feature map, `k` is 1-based.
pub type LayerHook<'h> = dyn FnMut(&mut Tape, usize, Var) -> Result<Var> + 'h;

impl BoundNetwork<'_> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .net
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"));
        self.vars[i]
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize> {
        let shape = tape.shape(x);
        let want = self.net.arch.input_len();
        if shape.len() != 2 || shape[1] != want {
            return Err(AlumError::shape(format!(
                "network input must be B×{want}, got {shape:?}"
            )));
        }
        Ok(shape[0])
    }

    /// Run the backbone on `x: B×D`, passing each layer's feature batch
    /// through `hook` before the activation. Returns penultimate features
    /// `B×C×H×W`.
    pub fn backbone(&self, tape: &mut Tape, x: Var, hook: &mut LayerHook<'_>) -> Result<Var> {
        let b = self.check_input(tape, x)?;
        let arch = &self.net.arch;
        match &arch.backbone {
            Backbone::Dense { grids, .. } => {
                let mut h = x;
                for (i, g) in grids.iter().enumerate() {
                    let k = i + 1;
                    let w = self.var(&format!("layer{k}.weight"));
                    let bias = self.var(&format!("layer{k}.bias"));
                    let z = tape.matmul(h, w)?;
                    let bias = tape.expand(bias, &[b, g.len()])?;
                    let z = tape.add(z, bias)?;
                    let f = tape.reshape(z, &[b, g.channels, g.height, g.width])?;
                    let f = hook(tape, k, f)?;
                    let a = tape.relu(f);
                    h = if k < grids.len() {
                        tape.reshape(a, &[b, g.len()])?
                    } else {
                        a
                    };
                }
                Ok(h)
            }
            Backbone::Conv {
                input,
                channels,
                kernel,
                pool,
            } => {
                let mut h = tape.reshape(x, &[b, input.channels, input.height, input.width])?;
                for k in 1..=channels.len() {
                    let w = self.var(&format!("layer{k}.weight"));
                    let bias = self.var(&format!("layer{k}.bias"));
                    let z = tape.conv2d(h, w, kernel / 2)?;
                    let shape = tape.shape(z).to_vec();
                    let bias = tape.expand(bias, &shape)?;
                    let z = tape.add(z, bias)?;
                    let f = hook(tape, k, z)?;
                    h = tape.relu(f);
                    if pool[k - 1] {
                        h = tape.max_pool2(h)?;
                    }
                }
                Ok(h)
            }
        }
    }

    /// Backbone without any layer transform.
    pub fn plain_backbone(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.backbone(tape, x, &mut |_, _, f| Ok(f))
    }

    /// Logits `B×K = f · Wᵀ` for embeddings `f: B×d`.
    pub fn logits(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let w = self.var("classifier.weight");
        let wt = tape.transpose(w)?;
        tape.matmul(f, wt)
    }
}

/// Per-sample embedding mean and variance predicted by the head.
#[derive(Debug, Clone)]
pub struct UncertainBatch {
    /// `B×d`
    pub mean: Var,
    /// `B×d`, strictly positive.
    pub variance: Var,
    pub labels: Vec<usize>,
}

impl UncertainBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Two-branch head: `μ = affine(flat F)`, `σ = softplus(affine(flat F)) + SIGMA_FLOOR`.
pub fn head_forward(
    tape: &mut Tape,
    net: &BoundNetwork<'_>,
    features: Var,
    labels: &[usize],
) -> Result<UncertainBatch> {
    let shape = tape.shape(features).to_vec();
    let want = net.net.arch.penultimate();
    if shape.len() != 4 || shape[1..] != [want.channels, want.height, want.width] {
        return Err(AlumError::shape(format!("head expects B×{want}, got {shape:?}")));
    }
    let b = shape[0];
    if labels.len() != b {
        return Err(AlumError::shape(format!("{} labels for batch of {b}", labels.len())));
    }
    let d = net.net.arch.embed_dim;
    let flat = tape.reshape(features, &[b, want.len()])?;

    let mw = net.var("head.mean.weight");
    let mb = net.var("head.mean.bias");
    let mean = tape.matmul(flat, mw)?;
    let mb = tape.expand(mb, &[b, d])?;
    let mean = tape.add(mean, mb)?;

    let vw = net.var("head.var.weight");
    let vb = net.var("head.var.bias");
    let raw = tape.matmul(flat, vw)?;
    let vb = tape.expand(vb, &[b, d])?;
    let raw = tape.add(raw, vb)?;
    let sp = tape.softplus(raw);
    let variance = tape.add_scalar(sp, SIGMA_FLOOR);

    Ok(UncertainBatch {
        mean,
        variance,
        labels: labels.to_vec(),
    })
}

/// How a variance vector is collapsed to a scalar for rejection ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreKind {
    #[default]
    Mean,
    Max,
}

impl FromStr for ScoreKind {
    type Err = AlumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ScoreKind::Mean),
            "max" => Ok(ScoreKind::Max),
            _ => Err(AlumError::Config(format!("unknown uncertainty score `{s}`"))),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Mean => "mean",
            ScoreKind::Max => "max",
        })
    }
}

/// One scalar per row of a `B×d` variance array.
pub fn uncertainty_score(variance: &DiffArray, kind: ScoreKind) -> Vec<f64> {
    let d = variance.shape()[1];
    variance
        .values()
        .chunks(d)
        .map(|row| match kind {
            ScoreKind::Mean => row.iter().sum::<f64>() / d as f64,
            ScoreKind::Max => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network {
        Network::init(Architecture::dense(3, Grid::new(2, 2, 1), 2, 4, 3), 11).unwrap()
    }

    #[test]
    fn zero_variance_branch_gives_softplus_zero() {
        let mut net = tiny();
        for name in ["head.var.weight", "head.var.bias"] {
            net.param_mut(name).unwrap().array.values_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let bound = net.bind_frozen(&mut t);
        let x = t.constant(DiffArray::new(&[2, 3], vec![0.3, -1.0, 2.0, 1.0, 0.0, -0.5]).unwrap());
        let f = bound.plain_backbone(&mut t, x).unwrap();
        let u = head_forward(&mut t, &bound, f, &[0, 1]).unwrap();
        for &s in t.value(u.variance).values() {
            assert!((s - (std::f64::consts::LN_2 + SIGMA_FLOOR)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mean_weights_give_bias_rows() {
        let mut net = tiny();
        net.param_mut("head.mean.weight").unwrap().array.values_mut().fill(0.0);
        net.param_mut("head.mean.bias")
            .unwrap()
            .array
            .values_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        let mut t = Tape::new();
        let bound = net.bind_frozen(&mut t);
        let x = t.constant(DiffArray::filled(&[3, 3], 0.7));
        let f = bound.plain_backbone(&mut t, x).unwrap();
        let u = head_forward(&mut t, &bound, f, &[0, 1, 2]).unwrap();
        for i in 0..3 {
            assert_eq!(t.value(u.mean).row(i), &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn score_is_mean_or_max() {
        let v = DiffArray::new(&[2, 2], vec![1.0, 3.0, 2.0, 2.0]).unwrap();
        assert_eq!(uncertainty_score(&v, ScoreKind::Mean), vec![2.0, 2.0]);
        assert_eq!(uncertainty_score(&v, ScoreKind::Max), vec![3.0, 2.0]);
    }

    #[test]
    fn descriptor_round_trips() {
        for arch in [
            Architecture::dense(10, Grid::new(16, 2, 2), 2, 64, 4),
            Architecture::small_conv(Grid::new(1, 8, 8), 32, 5),
        ] {
            assert_eq!(Architecture::from_descriptor(&arch.descriptor()).unwrap(), arch);
        }
    }

    #[test]
    fn conv_shapes() {
        let arch = Architecture::small_conv(Grid::new(1, 8, 8), 8, 3);
        assert_eq!(arch.layer_grid(1), Grid::new(8, 8, 8));
        assert_eq!(arch.layer_grid(2), Grid::new(16, 4, 4));
        assert_eq!(arch.penultimate(), Grid::new(16, 4, 4));
        let net = Network::init(arch, 1).unwrap();
        let mut t = Tape::new();
        let bound = net.bind(&mut t);
        let x = t.constant(DiffArray::filled(&[2, 64], 0.1));
        let f = bound.plain_backbone(&mut t, x).unwrap();
        assert_eq!(t.shape(f), &[2, 16, 4, 4]);
    }

    #[test]
    fn same_seed_same_init() {
        assert_eq!(tiny(), tiny());
    }
}
