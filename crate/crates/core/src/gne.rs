//! Gradient-norm-equality diagnostics: second moments, Monte Carlo estimates
//! of the normalized trace `φ(JJᵀ)` of block Jacobians, and batch-norm
//! initialization that pins the second moments the analysis relies on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{
    BlockFamily, BlockKind, BlockSpec, Branch, ForwardOptions, Input, Layer, Network, NetworkSpec, Shortcut,
};
use crate::error::{Error, Result};
use crate::spiking::{LifConfig, TdbnConfig};
use crate::tensor::{maxpool2d, Graph, NodeId, Scalar, Tensor};

/// Mean of squared elements; zero for an empty tensor.
pub fn second_moment<S: Scalar>(x: &Tensor<S>) -> f64 {
    if x.numel() == 0 {
        return 0.0;
    }
    x.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / x.numel() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiEstimate {
    pub phi: f64,
    pub stderr: f64,
    pub probes: usize,
}

impl PhiEstimate {
    /// Count-weighted combination of two independent estimates.
    pub fn merge(&self, other: &PhiEstimate) -> PhiEstimate {
        let n = (self.probes + other.probes) as f64;
        let (a, b) = (self.probes as f64 / n, other.probes as f64 / n);
        PhiEstimate {
            phi: a * self.phi + b * other.phi,
            stderr: (a * a * self.stderr * self.stderr + b * b * other.stderr * other.stderr).sqrt(),
            probes: self.probes + other.probes,
        }
    }
}

/// `φ̂ = mean ‖Jᵀv‖² / m_out` over `n_probes` standard-normal cotangents `v`,
/// where `J` is the Jacobian of `output` with respect to `input` as recorded
/// on `graph`. Spikes contribute their surrogate derivative.
pub fn estimate_phi<S: Scalar>(
    graph: &Graph<S>,
    input: NodeId,
    output: NodeId,
    n_probes: usize,
    seed: u64,
) -> Result<PhiEstimate> {
    if n_probes < 2 {
        return Err(Error::Config(format!("phi estimation needs at least 2 probes, got {n_probes}")));
    }
    if !graph.requires_grad(input) {
        return Err(Error::Graph("phi estimation needs a differentiable input".into()));
    }
    let shape = graph.value(output).shape().to_vec();
    let m_out = graph.value(output).numel() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let v = Tensor::from_fn(&shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            S::of(z)
        });
        let grads = graph.vjp(output, v)?;
        let norm = grads.get(input).map_or(0.0, |g| g.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>());
        samples.push(norm / m_out);
    }
    let n = n_probes as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(PhiEstimate { phi: mean, stderr: (var / n).sqrt(), probes: n_probes })
}

/// Forward options for Jacobian probes: batch statistics, nothing learned.
fn probe_options(steps: usize, branch: Branch) -> ForwardOptions {
    ForwardOptions { input_grad: true, record: false, branch, ..ForwardOptions::probe(steps) }
}

/// φ̂ of a block-chain network (no stem, no head) at a time-major input.
pub fn network_phi<S: Scalar>(
    net: &mut Network<S>,
    input: &Tensor<S>,
    steps: usize,
    n_probes: usize,
    seed: u64,
    branch: Branch,
) -> Result<PhiEstimate> {
    let pass = net.forward(&Input::Sequence(input.clone()), &probe_options(steps, branch))?;
    estimate_phi(&pass.graph, pass.input, pass.features, n_probes, seed)
}

/// A chain network holding blocks `range` of `net`, with their parameters
/// and running statistics copied over.
pub fn sub_network<S: Scalar>(net: &Network<S>, range: std::ops::Range<usize>) -> Result<Network<S>> {
    let blocks: Vec<(String, BlockSpec)> = net.blocks[range].iter().map(|b| (b.name.clone(), b.spec)).collect();
    let mut sub = Network::chain(&blocks, net.lif, net.bn, 0)?;
    for (name, t) in sub.store.params.iter_mut() {
        *t = net.store.get(name)?.clone();
    }
    for (name, stats) in sub.store.buffers.iter_mut() {
        *stats = net.store.buffers[name].clone();
    }
    Ok(sub)
}

/// Measurements taken while initializing one pool-concat shortcut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortcutInit {
    pub block: String,
    pub alpha2_maxpool: f64,
    pub alpha2_bn: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GneInit {
    pub stem_scale: Option<f64>,
    pub shortcuts: Vec<ShortcutInit>,
    /// Shortcuts whose target moment came out non-positive and kept their
    /// default scale (lenient initialization only).
    pub infeasible: Vec<String>,
}

/// Encoding-layer second moment after initialization.
pub const ENCODE_ALPHA2: f64 = 3.0;

/// Target second moment of the grown channels of a pool-concat shortcut so
/// that the whole shortcut output has second moment 2:
/// `(2·c_out − α₂^{maxpool}·c_in) / δ` with `δ = c_out − c_in`.
pub fn shortcut_bn_alpha2(c_in: usize, c_out: usize, alpha2_maxpool: f64) -> Result<f64> {
    if c_out <= c_in {
        return Err(Error::Config(format!("pool-concat shortcut must grow channels, got {c_in} -> {c_out}")));
    }
    let delta = (c_out - c_in) as f64;
    let a = (2.0 * c_out as f64 - alpha2_maxpool * c_in as f64) / delta;
    if a <= 0.0 || !a.is_finite() {
        return Err(Error::Numeric(format!(
            "shortcut target second moment {a} is not positive (c_in={c_in}, c_out={c_out}, maxpool alpha2={alpha2_maxpool})"
        )));
    }
    Ok(a)
}

/// Batch-norm scale whose train-mode output has second moment `alpha2`.
pub fn bn_scale_for(alpha2: f64, bn: &TdbnConfig) -> f64 {
    alpha2.sqrt() / (bn.alpha * bn.v_th)
}

fn fill_scale<S: Scalar>(net: &mut Network<S>, bn: &str, value: f64) -> Result<()> {
    let t = net.store.get_mut(&format!("{bn}.scale"))?;
    t.data_mut().iter_mut().for_each(|v| *v = S::of(value));
    let shift = net.store.get_mut(&format!("{bn}.shift"))?;
    shift.data_mut().iter_mut().for_each(|v| *v = S::zero());
    Ok(())
}

fn last_bn(layers: &[Layer]) -> Option<&str> {
    layers.iter().rev().find_map(|l| match l {
        Layer::Bn { name, .. } => Some(name.as_str()),
        _ => None,
    })
}

/// Sets the encoding batch norm so its output has second moment
/// `ENCODE_ALPHA2`, and the batch norm of each pool-concat shortcut so the
/// whole shortcut output has second moment 2, from the max-pooled input
/// moment measured on `probe`. Other batch norms keep their scales. A
/// non-positive shortcut target is an error.
pub fn init_bn_gne<S: Scalar>(net: &mut Network<S>, probe: &Input<S>, steps: usize) -> Result<GneInit> {
    init_shortcuts(net, probe, steps, true)
}

/// Like `init_bn_gne`, but shortcuts with a non-positive target keep their
/// scale and are listed in `infeasible`.
pub fn init_bn_gne_lenient<S: Scalar>(net: &mut Network<S>, probe: &Input<S>, steps: usize) -> Result<GneInit> {
    init_shortcuts(net, probe, steps, false)
}

fn init_shortcuts<S: Scalar>(net: &mut Network<S>, probe: &Input<S>, steps: usize, strict: bool) -> Result<GneInit> {
    let bn = net.bn;
    let mut report = GneInit::default();
    if let Some(name) = last_bn(&net.stem).map(str::to_string) {
        let scale = bn_scale_for(ENCODE_ALPHA2, &bn);
        fill_scale(net, &name, scale)?;
        report.stem_scale = Some(scale);
    }
    // In block order, so each measurement sees the blocks before it
    // already initialized.
    for idx in 0..net.blocks.len() {
        let block = &net.blocks[idx];
        let Shortcut::PoolConcat(branch) = &block.shortcut else { continue };
        let bn_name = last_bn(branch).ok_or_else(|| Error::Config(format!("{} has no shortcut norm", block.name)))?;
        let (bn_name, block_name, spec) = (bn_name.to_string(), block.name.clone(), block.spec);
        let pass = net.forward(probe, &ForwardOptions { record: false, ..ForwardOptions::probe(steps) })?;
        let mut g = Graph::new();
        let x = g.constant(pass.graph.value(pass.block_inputs[idx]).clone());
        let pooled = maxpool2d(&mut g, x, 2, 2)?;
        let alpha2_maxpool = second_moment(g.value(pooled));
        let alpha2_bn = match shortcut_bn_alpha2(spec.in_channels, spec.out_channels, alpha2_maxpool) {
            Ok(a) => a,
            Err(e) if !strict => {
                report.infeasible.push(format!("{block_name}: {e}"));
                continue;
            }
            Err(e) => return Err(Error::Numeric(format!("{block_name}: {e}"))),
        };
        let scale = bn_scale_for(alpha2_bn, &bn);
        fill_scale(net, &bn_name, scale)?;
        report.shortcuts.push(ShortcutInit { block: block_name, alpha2_maxpool, alpha2_bn, scale });
    }
    Ok(report)
}

/// Settings of the diagnostic run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GneConfig {
    pub depth: usize,
    pub depths: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub resolution: usize,
    pub n_probes: usize,
    pub seed: u64,
    /// Whether to apply `init_bn_gne`; off gives the uninitialized control.
    pub init: bool,
}

impl Default for GneConfig {
    fn default() -> Self {
        Self { depth: 10, depths: vec![10, 18, 34], steps: 4, batch: 4, resolution: 64, n_probes: 256, seed: 0, init: true }
    }
}

pub const PHI_TOLERANCE: f64 = 0.15;
pub const ENCODE_TOLERANCE: f64 = 0.05;
pub const MOMENT_TOLERANCE: f64 = 0.10;
pub const COMPOSITION_TOLERANCE: f64 = 0.20;
pub const DEPTH_RATIO_BAND: (f64, f64) = (0.1, 10.0);

fn within(measured: f64, expected: f64, tol: f64) -> bool {
    (measured - expected).abs() <= tol * expected.abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPhi {
    pub name: String,
    pub alpha2_in: f64,
    pub phi_hat: f64,
    pub stderr: f64,
    pub expected: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub name: String,
    pub alpha2: f64,
    pub expected: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRatio {
    pub deeper: usize,
    pub shallower: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionCheck {
    pub first: String,
    pub second: String,
    pub phi_first: f64,
    pub phi_second: f64,
    pub phi_composed: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub rows: Vec<DepthRow>,
    pub ratios: Vec<DepthRatio>,
    /// Deepest over shallowest ratio lies in `DEPTH_RATIO_BAND`.
    pub pass: bool,
    pub composition: Option<CompositionCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GneReport {
    pub config: GneConfig,
    pub init: Option<GneInit>,
    pub encode: MomentCheck,
    /// Blocks of the configured network on the inputs they actually see.
    pub blocks: Vec<BlockPhi>,
    /// Single blocks on Gaussian inputs with second moment 2.
    pub isolated: Vec<BlockPhi>,
    pub inter_block: Vec<MomentCheck>,
    pub depth: DepthReport,
    pub all_pass: bool,
}

fn gaussian<S: Scalar>(shape: &[usize], std: f64, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        S::of(std * z)
    })
}

fn backbone(depth: usize) -> NetworkSpec {
    NetworkSpec { depth, family: BlockFamily::Ems, head: None, ..NetworkSpec::default() }
}

/// Expected `φ` of a block whose input has second moment `alpha2_in`: two
/// unit-moment branches for the full-spike blocks, and the input passed
/// through plus one unit-moment branch for an identity-shortcut block.
pub fn expected_phi(kind: BlockKind, alpha2_in: f64) -> f64 {
    match kind {
        BlockKind::Ms | BlockKind::Sew => (alpha2_in + 1.0) / alpha2_in,
        _ => 2.0 / alpha2_in,
    }
}

fn probe_images<S: Scalar>(cfg: &GneConfig) -> Input<S> {
    Input::Static(gaussian(&[cfg.batch, 3, cfg.resolution, cfg.resolution], 1.0, cfg.seed))
}

/// Gradient norm of the encoding weights, per depth, under a fixed random
/// readout of the final features; plus the multiplication check on the first
/// two blocks of the depth-18 (or the first listed) backbone.
pub fn depth_gradient_diagnostic(cfg: &GneConfig, lif: LifConfig, bn: TdbnConfig) -> Result<DepthReport> {
    let probe = probe_images::<f32>(cfg);
    let mut rows = Vec::new();
    let mut readout: Option<Tensor<f32>> = None;
    let mut composition = None;
    let compose_depth = if cfg.depths.contains(&18) { Some(18) } else { cfg.depths.first().copied() };
    for &depth in &cfg.depths {
        let mut net = Network::<f32>::new(&backbone(depth), lif, bn, cfg.seed)?;
        if cfg.init {
            init_bn_gne_lenient(&mut net, &probe, cfg.steps)?;
        }
        rows.push(DepthRow { depth, grad_norm: encode_grad_norm(&mut net, &probe, cfg, &mut readout)? });
        if Some(depth) == compose_depth && composition.is_none() && net.blocks.len() >= 2 {
            composition = Some(composition_check(&mut net, &probe, cfg)?);
        }
    }
    let mut ratios = Vec::new();
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let (deep, shallow) = if b.depth >= a.depth { (b, a) } else { (a, b) };
            ratios.push(DepthRatio { deeper: deep.depth, shallower: shallow.depth, ratio: deep.grad_norm / shallow.grad_norm });
        }
    }
    let deepest = rows.iter().max_by_key(|r| r.depth);
    let shallowest = rows.iter().min_by_key(|r| r.depth);
    let pass = match (deepest, shallowest) {
        (Some(d), Some(s)) => {
            let r = d.grad_norm / s.grad_norm;
            r.is_finite() && (DEPTH_RATIO_BAND.0..=DEPTH_RATIO_BAND.1).contains(&r)
        }
        _ => false,
    };
    Ok(DepthReport { rows, ratios, pass, composition })
}

/// `‖∂(r·features)/∂W_encode‖` for a readout `r` shared across depths.
fn encode_grad_norm(
    net: &mut Network<f32>,
    probe: &Input<f32>,
    cfg: &GneConfig,
    readout: &mut Option<Tensor<f32>>,
) -> Result<f64> {
    let opts = ForwardOptions { update_running: false, ..ForwardOptions::train(cfg.steps) };
    let pass = net.forward(probe, &opts)?;
    let shape = pass.graph.value(pass.features).shape().to_vec();
    let r = readout.get_or_insert_with(|| gaussian(&shape, 1.0, cfg.seed ^ 0x5eed));
    if r.shape() != shape.as_slice() {
        return Err(Error::shape("depth diagnostic", "feature shapes differ across depths"));
    }
    let grads = pass.graph.vjp(pass.features, r.clone())?;
    let w = pass.params.get("stem.conv.weight").ok_or_else(|| Error::Config("network has no encoding conv".into()))?;
    Ok(grads.get(*w).map_or(0.0, |g| g.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt()))
}

fn composition_check(net: &mut Network<f32>, probe: &Input<f32>, cfg: &GneConfig) -> Result<CompositionCheck> {
    let pass = net.forward(probe, &ForwardOptions { record: false, ..ForwardOptions::probe(cfg.steps) })?;
    let x0 = pass.graph.value(pass.block_inputs[0]).clone();
    let x1 = pass.graph.value(pass.block_inputs[1]).clone();
    let phi = |range: std::ops::Range<usize>, x: &Tensor<f32>, seed| -> Result<f64> {
        let mut sub = sub_network(net, range)?;
        Ok(network_phi(&mut sub, x, cfg.steps, cfg.n_probes, seed, Branch::Both)?.phi)
    };
    let phi_first = phi(0..1, &x0, cfg.seed + 1)?;
    let phi_second = phi(1..2, &x1, cfg.seed + 2)?;
    let phi_composed = phi(0..2, &x0, cfg.seed + 3)?;
    Ok(CompositionCheck {
        first: net.blocks[0].name.clone(),
        second: net.blocks[1].name.clone(),
        phi_first,
        phi_second,
        phi_composed,
        pass: within(phi_composed, phi_first * phi_second, COMPOSITION_TOLERANCE),
    })
}

/// Builds the configured full-spike backbone, optionally applies
/// `init_bn_gne`, and checks every moment and Jacobian expectation.
pub fn gne_report(cfg: &GneConfig, lif: LifConfig, bn: TdbnConfig) -> Result<GneReport> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Config("steps and batch must be at least 1".into()));
    }
    let probe = probe_images::<f32>(cfg);
    let mut net = Network::<f32>::new(&backbone(cfg.depth), lif, bn, cfg.seed)?;
    let init = if cfg.init { Some(init_bn_gne_lenient(&mut net, &probe, cfg.steps)?) } else { None };
    let pass = net.forward(&probe, &ForwardOptions::probe(cfg.steps))?;
    let moment = |name: &str| pass.moments.iter().find(|(n, _)| n == name).map(|m| m.1).unwrap_or(0.0);

    let stem_alpha2 = moment("stem");
    let encode = MomentCheck {
        name: "stem".into(),
        alpha2: stem_alpha2,
        expected: ENCODE_ALPHA2,
        pass: within(stem_alpha2, ENCODE_ALPHA2, ENCODE_TOLERANCE),
    };
    let mut inter_block = Vec::new();
    let mut blocks = Vec::new();
    for (i, block) in net.blocks.iter().enumerate() {
        let input = pass.graph.value(pass.block_inputs[i]).clone();
        let alpha2_in = second_moment(&input);
        let mut sub = sub_network(&net, i..i + 1)?;
        let est = network_phi(&mut sub, &input, cfg.steps, cfg.n_probes, cfg.seed + 100 + i as u64, Branch::Both)?;
        let expected = expected_phi(block.spec.kind, alpha2_in);
        blocks.push(BlockPhi {
            name: block.name.clone(),
            alpha2_in,
            phi_hat: est.phi,
            stderr: est.stderr,
            expected,
            pass: within(est.phi, expected, PHI_TOLERANCE),
        });
        if matches!(block.spec.kind, BlockKind::Ems1 | BlockKind::Ems2) {
            let a = moment(&block.name);
            inter_block.push(MomentCheck {
                name: block.name.clone(),
                alpha2: a,
                expected: 2.0,
                pass: within(a, 2.0, MOMENT_TOLERANCE),
            });
        }
    }
    drop(pass);

    let side = cfg.resolution / 4;
    let mut isolated = Vec::new();
    for (name, spec) in [
        ("ems2", BlockSpec::new(BlockKind::Ems2, 32, 64, 2)),
        ("ms", BlockSpec::new(BlockKind::Ms, 64, 64, 1)),
    ] {
        let mut single = Network::<f32>::chain(&[(name.to_string(), spec)], lif, bn, cfg.seed)?;
        let x = gaussian::<f32>(&[cfg.steps * cfg.batch, spec.in_channels, side, side], 2f64.sqrt(), cfg.seed + 7);
        if cfg.init {
            init_bn_gne_lenient(&mut single, &Input::Sequence(x.clone()), cfg.steps)?;
        }
        let alpha2_in = second_moment(&x);
        let est = network_phi(&mut single, &x, cfg.steps, cfg.n_probes, cfg.seed + 11, Branch::Both)?;
        let expected = expected_phi(spec.kind, alpha2_in);
        isolated.push(BlockPhi {
            name: name.into(),
            alpha2_in,
            phi_hat: est.phi,
            stderr: est.stderr,
            expected,
            pass: within(est.phi, expected, PHI_TOLERANCE),
        });
    }

    let depth = depth_gradient_diagnostic(cfg, lif, bn)?;
    let all_pass = init.as_ref().is_none_or(|i| i.infeasible.is_empty())
        && encode.pass
        && blocks.iter().chain(&isolated).all(|b| b.pass)
        && inter_block.iter().all(|m| m.pass)
        && depth.pass
        && depth.composition.as_ref().is_none_or(|c| c.pass);
    Ok(GneReport { config: cfg.clone(), init, encode, blocks, isolated, inter_block, depth, all_pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::scale;

    #[test]
    fn second_moment_examples() {
        assert_eq!(second_moment(&Tensor::<f64>::ones(&[4])), 1.0);
        assert_eq!(second_moment(&Tensor::<f64>::new(vec![2], vec![2.0, 0.0]).unwrap()), 2.0);
        assert_eq!(second_moment(&Tensor::<f64>::zeros(&[3, 3])), 0.0);
    }

    fn linear_phi(factor: f64, n: usize, seed: u64) -> PhiEstimate {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(gaussian(&[4, 8, 3, 3], 1.0, 1), true);
        let y = scale(&mut g, x, factor);
        estimate_phi(&g, x, y, n, seed).unwrap()
    }

    #[test]
    fn linear_maps() {
        let id = linear_phi(1.0, 64, 0);
        assert!((id.phi - 1.0).abs() < 0.05, "{id:?}");
        let two = linear_phi(2.0, 64, 0);
        assert!((two.phi - 4.0).abs() < 0.2, "{two:?}");
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        assert!(estimate_phi(&g, x, x, 1, 0).is_err());
    }

    #[test]
    fn stderr_shrinks_with_probe_count() {
        // A random-sign diagonal map keeps per-probe variance well away from 0.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(gaussian(&[1, 4, 2, 2], 1.0, 3), true);
        let w = g.constant(gaussian(&[1, 4, 2, 2], 1.0, 4));
        let y = crate::tensor::mul(&mut g, x, w).unwrap();
        let ratios: Vec<f64> = (0..8)
            .map(|s| estimate_phi(&g, x, y, 64, s).unwrap().stderr / estimate_phi(&g, x, y, 256, 100 + s).unwrap().stderr)
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 2.0).abs() < 0.3, "{ratios:?}");
    }

    #[test]
    fn shortcut_formula() {
        assert!((shortcut_bn_alpha2(32, 64, 2.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((bn_scale_for(2.0, &TdbnConfig::default()) - 2.828_427_124_746_19).abs() < 1e-12);
        assert!((bn_scale_for(3.0, &TdbnConfig::default()) - 3.464_101_615_137_754).abs() < 1e-12);
        // No identity channels: the pooled part vanishes from the formula.
        assert!((shortcut_bn_alpha2(0, 64, 5.0).unwrap() - 2.0).abs() < 1e-12);
        let err = shortcut_bn_alpha2(32, 64, 4.5).unwrap_err();
        assert!(err.to_string().contains("4.5"), "{err}");
    }

    #[test]
    fn encode_init_gives_target_moment() {
        let cfg = GneConfig { batch: 2, ..GneConfig::default() };
        let probe = probe_images::<f32>(&cfg);
        let mut net = Network::<f32>::new(&backbone(10), LifConfig::default(), TdbnConfig::default(), 0).unwrap();
        // The first stage sees the encoding output, whose pooled moment is
        // too large for the shortcut target to stay positive.
        let err = init_bn_gne(&mut net.clone(), &probe, 2).unwrap_err();
        assert!(err.to_string().contains("stage1.block0") && err.to_string().contains("maxpool alpha2"), "{err}");
        let init = init_bn_gne_lenient(&mut net, &probe, 2).unwrap();
        assert_eq!(init.infeasible.len() + init.shortcuts.len(), 4);
        let pass = net.forward(&probe, &ForwardOptions::probe(2)).unwrap();
        let stem = pass.moments.iter().find(|m| m.0 == "stem").unwrap().1;
        assert!((stem - 3.0).abs() < 0.05 * 3.0, "{stem}");
        // Each pool-concat shortcut alone carries second moment 2.
        for (i, b) in net.blocks.iter().enumerate() {
            if !init.shortcuts.iter().any(|s| s.block == b.name) {
                continue;
            }
            let x = pass.graph.value(pass.block_inputs[i]).clone();
            let mut sub = sub_network(&net, i..i + 1).unwrap();
            let opts = ForwardOptions { branch: Branch::Shortcut, ..ForwardOptions::probe(2) };
            let out = sub.forward(&Input::Sequence(x), &opts).unwrap();
            let a = second_moment(out.graph.value(out.features));
            assert!((a - 2.0).abs() < 0.05, "{}: {a}", b.name);
        }
    }

    #[test]
    fn addition_over_independent_paths() {
        for (kind, cin, cout, stride) in [(BlockKind::Ems1, 64, 32, 1), (BlockKind::Ems2, 32, 64, 2), (BlockKind::Ms, 32, 32, 1)] {
            let spec = BlockSpec::new(kind, cin, cout, stride);
            let mut net = Network::<f32>::chain(&[("b".into(), spec)], LifConfig::default(), TdbnConfig::default(), 9).unwrap();
            let x = gaussian::<f32>(&[8, cin, 8, 8], 2f64.sqrt(), 5);
            let mut phi = |branch| network_phi(&mut net, &x, 2, 64, 1, branch).unwrap().phi;
            let (both, res, short) = (phi(Branch::Both), phi(Branch::Residual), phi(Branch::Shortcut));
            assert!(within(both, res + short, COMPOSITION_TOLERANCE), "{kind:?}: {both} vs {res} + {short}");
        }
    }

    #[test]
    fn zero_parameters_give_zero_gradients() {
        let cfg = GneConfig { batch: 1, steps: 1, depths: vec![10], ..GneConfig::default() };
        let probe = probe_images::<f32>(&cfg);
        let mut net = Network::<f32>::new(&backbone(10), LifConfig::default(), TdbnConfig::default(), 0).unwrap();
        for t in net.store.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut readout = None;
        assert_eq!(encode_grad_norm(&mut net, &probe, &cfg, &mut readout).unwrap(), 0.0);
    }
}
