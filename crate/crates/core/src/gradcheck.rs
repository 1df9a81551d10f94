//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values on fresh tapes, so it
//! shares no code path with the analytic backward pass it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::compensation::{compensate, CompensationConfig, EpsMode, PerturbationDraw};
use crate::error::Result;
use crate::losses::{ce_loss, mixup, total_loss, triplet_loss, Members, MixWeighting, TripletLabels};
use crate::mining::{mine_triplets, TripletPlan};
use crate::network::{head_forward, Architecture, BoundNetwork, Grid, Network};
use crate::rng::{RngKey, StepKey};
use crate::stats::layer_stats;
use crate::tensor::{DiffArray, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(inputs: &[DiffArray], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compare the tape gradient of scalar `f(inputs)` against central differences
/// for every element of every input.
pub fn check_gradients<F>(inputs: &[DiffArray], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|a| tape.leaf(a.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        passed: true,
    };
    let mut probe: Vec<DiffArray> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[i].len()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].values()[j];
            probe[i].values_mut()[j] = orig + cfg.step;
            let plus = eval(&probe, &f)?;
            probe[i].values_mut()[j] = orig - cfg.step;
            let minus = eval(&probe, &f)?;
            probe[i].values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = rel_err(a, numeric, cfg.floor);
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

/// Scalar function under test.
pub type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One named finite-difference check: a scalar function and the inputs it is
/// differentiated against.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<DiffArray>,
    pub f: CaseFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DiffArray {
    let n = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("nonzero shape")
}

/// Values whose magnitude is at least `gap`, so kinks at 0 stay out of reach.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> DiffArray {
    let mut a = uniform(rng, shape, gap, 2.0);
    for v in a.values_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    a
}

/// Reduce any output to a scalar with a fixed non-uniform weighting, so every
/// output element contributes a distinct gradient.
fn probe(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    if shape.is_empty() {
        return Ok(out);
    }
    let n: usize = shape.iter().product();
    let w = (0..n)
        .map(|i| ((i as f64) * 0.618_033_988_7 + 0.25).fract() * 2.0 - 1.0)
        .collect();
    let w = tape.constant(DiffArray::new(&shape, w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

macro_rules! case {
    ($name:literal, [$($input:expr),+ $(,)?], |$t:ident, $v:ident| $body:expr) => {
        GradCase {
            name: $name,
            inputs: vec![$($input),+],
            f: Box::new(move |$t: &mut Tape, $v: &[Var]| -> Result<Var> {
                let out = $body;
                probe($t, out)
            }),
        }
    };
}

fn tiny_arch() -> Architecture {
    Architecture::dense(3, Grid::new(2, 2, 2), 2, 4, 3)
}

/// Every differentiable tape operation, the pipeline stages built on them,
/// and the end-to-end training loss through compensation, head and mixup.
pub fn standard_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = RngKey::root(seed).child(0x6772_6164).rng();
    let r = &mut rng;
    let mut cases = vec![
        case!(
            "matmul",
            [uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4, 2], -2.0, 2.0)],
            |t, v| t.matmul(v[0], v[1])?
        ),
        case!("transpose", [uniform(r, &[3, 2], -2.0, 2.0)], |t, v| t
            .transpose(v[0])?),
        case!(
            "conv2d",
            [
                uniform(r, &[1, 2, 5, 5], -2.0, 2.0),
                uniform(r, &[3, 2, 3, 3], -2.0, 2.0)
            ],
            |t, v| t.conv2d(v[0], v[1], 1)?
        ),
        case!("relu", [away_from_zero(r, &[2, 5], 0.05)], |t, v| t.relu(v[0])),
        case!(
            "add",
            [uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[2, 3], -2.0, 2.0)],
            |t, v| t.add(v[0], v[1])?
        ),
        case!(
            "sub",
            [uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[2, 3], -2.0, 2.0)],
            |t, v| t.sub(v[0], v[1])?
        ),
        case!(
            "mul",
            [uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[2, 3], -2.0, 2.0)],
            |t, v| t.mul(v[0], v[1])?
        ),
        case!(
            "div",
            [uniform(r, &[2, 3], -2.0, 2.0), away_from_zero(r, &[2, 3], 0.5)],
            |t, v| t.div(v[0], v[1])?
        ),
        case!("scale", [uniform(r, &[4], -2.0, 2.0)], |t, v| t.scale(v[0], -1.7)),
        case!("add_scalar", [uniform(r, &[4], -2.0, 2.0)], |t, v| t
            .add_scalar(v[0], 0.3)),
        case!("exp", [uniform(r, &[2, 3], -2.0, 2.0)], |t, v| t.exp(v[0])),
        case!("log", [uniform(r, &[2, 3], 0.5, 2.0)], |t, v| t.log(v[0])?),
        case!("sqrt", [uniform(r, &[2, 3], 0.5, 2.0)], |t, v| t.sqrt(v[0])?),
        case!("softplus", [uniform(r, &[2, 3], -2.0, 2.0)], |t, v| t.softplus(v[0])),
        case!("reshape", [uniform(r, &[2, 6], -2.0, 2.0)], |t, v| t
            .reshape(v[0], &[3, 2, 2])?),
        case!("expand", [uniform(r, &[1, 3], -2.0, 2.0)], |t, v| t
            .expand(v[0], &[4, 3])?),
        case!("spatial_mean", [uniform(r, &[2, 3, 2, 2], -2.0, 2.0)], |t, v| t
            .spatial_mean(v[0])?),
        case!("spatial_std", [uniform(r, &[2, 3, 2, 2], -2.0, 2.0)], |t, v| t
            .spatial_std(v[0])?),
        case!("batch_mean", [uniform(r, &[4, 3], -2.0, 2.0)], |t, v| t
            .batch_mean(v[0])?),
        case!("batch_std", [uniform(r, &[4, 3], -2.0, 2.0)], |t, v| t
            .batch_std(v[0])?),
        case!("sum", [uniform(r, &[2, 3], -2.0, 2.0)], |t, v| t.sum(v[0])),
        case!("row_sum", [uniform(r, &[3, 4], -2.0, 2.0)], |t, v| t.row_sum(v[0])?),
        case!("max_pool2", [uniform(r, &[2, 2, 4, 4], -2.0, 2.0)], |t, v| t
            .max_pool2(v[0])?),
        case!("l2_norm", [away_from_zero(r, &[3, 4], 0.2)], |t, v| t.l2_norm(v[0])?),
        case!(
            "cosine_sim",
            [away_from_zero(r, &[3, 4], 0.2), away_from_zero(r, &[3, 4], 0.2)],
            |t, v| t.cosine_sim(v[0], v[1])?
        ),
        case!("logsumexp", [uniform(r, &[3, 5], -2.0, 2.0)], |t, v| t
            .logsumexp(v[0])?),
        case!("gather_rows", [uniform(r, &[4, 3], -2.0, 2.0)], |t, v| t
            .gather_rows(v[0], &[2, 0, 2, 3, 1])?),
        case!("pick", [uniform(r, &[3, 4], -2.0, 2.0)], |t, v| t
            .pick(v[0], &[3, 0, 2])?),
        case!("layer_stats", [uniform(r, &[4, 3, 2, 2], -2.0, 2.0)], |t, v| {
            let s = layer_stats(t, v[0])?;
            let a = t.sum(s.std_of_means);
            let b = t.sum(s.std_of_stds);
            let c = t.sum(s.mean_of_stds);
            let ab = t.add(a, b)?;
            let abc = t.add(ab, c)?;
            let u = probe(t, s.instance_std)?;
            t.add(abc, u)?
        }),
    ];

    for mode in [EpsMode::PerElement, EpsMode::SharedScalar] {
        let draw = PerturbationDraw::sample(RngKey::root(seed).child(1), 4, 3, mode);
        let name = match mode {
            EpsMode::PerElement => "compensate",
            EpsMode::SharedScalar => "compensate_shared",
        };
        let features = uniform(r, &[4, 3, 2, 2], -2.0, 2.0);
        cases.push(GradCase {
            name,
            inputs: vec![features],
            f: Box::new(move |t, v| {
                let stats = layer_stats(t, v[0])?;
                let out = compensate(t, v[0], &stats, &draw, &CompensationConfig::default())?;
                probe(t, out)
            }),
        });
    }

    // head, mixup and losses with a plan mined once from the initial means
    let net = Network::init(tiny_arch(), seed)?;
    let feats = uniform(r, &[6, 2, 2, 2], 0.0, 2.0);
    let labels = vec![0, 1, 2, 0, 1, 2];
    let plan = {
        let mut t = Tape::new();
        let bound = net.bind_frozen(&mut t);
        let f = t.constant(feats.clone());
        let u = head_forward(&mut t, &bound, f, &labels)?;
        mine_triplets(t.value(u.mean), &labels, 0.5, RngKey::root(seed).child(2))?
    };
    let head_names = [
        "head.mean.weight",
        "head.mean.bias",
        "head.var.weight",
        "head.var.bias",
        "classifier.weight",
    ];
    let head_inputs: Vec<DiffArray> = head_names
        .iter()
        .map(|n| net.param(n).expect("head param").array.clone())
        .collect();

    for (name, weighting) in [
        ("head_mixup_ce", MixWeighting::Sigma),
        ("head_mixup_ce_inverse", MixWeighting::InverseSigma),
    ] {
        let (net, feats, labels, plan) = (net.clone(), feats.clone(), labels.clone(), plan.clone());
        let mut inputs = head_inputs.clone();
        inputs.push(feats);
        cases.push(GradCase {
            name,
            inputs,
            f: Box::new(move |t, v| {
                let mut vars: Vec<Var> = vec![v[0]; net.params.len()];
                for (k, n) in head_names.iter().enumerate() {
                    let i = net.params.iter().position(|p| p.name == *n).expect("head param");
                    vars[i] = v[k];
                }
                let bound = BoundNetwork { net: &net, vars };
                let u = head_forward(t, &bound, v[5], &labels)?;
                let mixed = mixup(t, &u, &plan, Members::ALL, weighting)?;
                let tl = TripletLabels::new(&labels, &plan, Members::ALL);
                let ce = ce_loss(t, mixed.f, v[4], &tl)?;
                let s = t.sum(u.variance);
                t.add(ce, s)
            }),
        });
    }

    let mean = uniform(r, &[6, 4], -2.0, 2.0);
    let plan_t = plan.clone();
    cases.push(GradCase {
        name: "triplet_loss",
        inputs: vec![mean],
        f: Box::new(move |t, v| triplet_loss(t, v[0], &plan_t, 1.0)),
    });

    // full objective through both compensated layers, with draws held fixed
    let step = StepKey::new(RngKey::root(seed), 0, 0);
    let mut x = uniform(r, &[6, 3], -2.0, 2.0);
    for _ in 0..100 {
        if end_to_end_margin(&net, &x, &labels, &plan, step)? >= SAFE_MARGIN {
            break;
        }
        x = uniform(r, &[6, 3], -2.0, 2.0);
    }
    let e2e_net = net.clone();
    cases.push(GradCase {
        name: "end_to_end",
        inputs: net.params.iter().map(|p| p.array.clone()).collect(),
        f: Box::new(move |t, v| {
            let bound = BoundNetwork {
                net: &e2e_net,
                vars: v.to_vec(),
            };
            let (loss, _) = end_to_end_loss(t, &bound, &x, &labels, &plan, step, &mut |_, _| {})?;
            Ok(loss)
        }),
    });
    Ok(cases)
}

/// Smallest allowed distance to a kink (relu, hinge) or to a zero instance std
/// at the point where the end-to-end gradient is checked.
const SAFE_MARGIN: f64 = 1e-2;

type Observer<'o> = dyn FnMut(&Tape, Var) + 'o;

/// Training objective with λ = 0.1 so the triplet path is clearly visible.
/// `observe` sees every relu input, hinge argument and instance std.
fn end_to_end_loss(
    t: &mut Tape,
    bound: &BoundNetwork<'_>,
    x: &DiffArray,
    labels: &[usize],
    plan: &TripletPlan,
    step: StepKey,
    observe: &mut Observer<'_>,
) -> Result<(Var, Var)> {
    let xv = t.constant(x.clone());
    let cfg = CompensationConfig::layers(&[1, 2]);
    let feats = bound.backbone(t, xv, &mut |t, k, f| {
        let stats = layer_stats(t, f)?;
        observe(t, stats.instance_std);
        let shape = t.shape(f).to_vec();
        let draw = PerturbationDraw::sample(step.compensation(k), shape[0], shape[1], cfg.mode);
        let out = compensate(t, f, &stats, &draw, &cfg)?;
        observe(t, out);
        Ok(out)
    })?;
    let u = head_forward(t, bound, feats, labels)?;
    let mixed = mixup(t, &u, plan, Members::ALL, MixWeighting::Sigma)?;
    let tl = TripletLabels::new(labels, plan, Members::ALL);
    let classifier = bound.var("classifier.weight");
    let ce = ce_loss(t, mixed.f, classifier, &tl)?;
    let trip = triplet_loss(t, u.mean, plan, 1.0)?;
    let (loss, _) = total_loss(t, ce, trip, 0.1, 1.0)?;
    Ok((loss, u.mean))
}

fn end_to_end_margin(net: &Network, x: &DiffArray, labels: &[usize], plan: &TripletPlan, step: StepKey) -> Result<f64> {
    let mut t = Tape::new();
    let bound = net.bind_frozen(&mut t);
    let mut margin = f64::INFINITY;
    let (_, mean) = end_to_end_loss(&mut t, &bound, x, labels, plan, step, &mut |t, v| {
        margin = t.value(v).values().iter().fold(margin, |m, a| m.min(a.abs()));
    })?;
    let mu = t.value(mean);
    let sq = |i: usize, j: usize| {
        mu.row(i)
            .iter()
            .zip(mu.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    for i in 0..plan.len() {
        if plan.valid_mask[i] {
            margin = margin.min((sq(i, plan.pos_index[i]) - sq(i, plan.neg_index[i]) + 1.0).abs());
        }
    }
    Ok(margin)
}

/// Run every standard case for every seed.
pub fn run_suite(seeds: &[u64], cfg: GradCheckConfig) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for case in standard_cases(seed)? {
            let report = check_gradients(&case.inputs, &case.f, cfg)?;
            out.push(SuiteResult {
                name: case.name,
                seed,
                report,
            });
        }
    }
    Ok(out)
}
