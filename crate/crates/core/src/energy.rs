//! Synaptic-operation counts, firing rates and the energy estimate.
//!
//! A convolution whose input is spikes costs one accumulate per synaptic
//! operation and input spike; anything else costs a multiply-accumulate per
//! operation. Batch norms are folded into the preceding convolution and cost
//! nothing; pooling, upsampling and concatenation cost nothing either.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::{ConvRecord, ForwardOptions, Input, LayerRole, Network};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Energy of one 32-bit multiply-accumulate at 45 nm, in picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy of one 32-bit accumulate at 45 nm, in picojoules.
pub const E_AC_PJ: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub name: String,
    pub block: String,
    pub role: LayerRole,
    /// Synaptic operations per image and time step.
    pub op_capacity: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCount {
    pub layers: Vec<LayerOps>,
}

/// Operation capacity of every convolution of `net` at the given input size.
pub fn count_ops<S: Scalar>(net: &Network<S>, height: usize, width: usize) -> Result<OpCount> {
    let layers = net
        .conv_geometry(height, width)?
        .into_iter()
        .map(|g| LayerOps { op_capacity: g.op_capacity(), name: g.def.name, block: g.block, role: g.def.role })
        .collect();
    Ok(OpCount { layers })
}

/// Input statistics of one convolution, accumulated over forward passes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerFiring {
    /// Sum of input values; the number of ones when the input is binary.
    pub input_sum: f64,
    pub elements: u64,
    /// Inputs that were neither 0 nor 1.
    pub non_binary: u64,
    pub max_input: f64,
    pub samples: u64,
}

impl LayerFiring {
    /// Mean input over all elements and time steps.
    pub fn rate(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.input_sum / self.elements as f64
        }
    }

    pub fn is_binary(&self) -> bool {
        self.non_binary == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FiringStats {
    pub layers: BTreeMap<String, LayerFiring>,
}

impl FiringStats {
    /// Folds in the records of one forward pass over `batch` images.
    pub fn record(&mut self, records: &[ConvRecord], batch: u64) {
        for r in records {
            let entry = self.layers.entry(r.name.clone()).or_default();
            entry.input_sum += r.input_sum;
            entry.elements += r.input_count;
            entry.non_binary += r.non_binary;
            entry.max_input = entry.max_input.max(r.max_input);
            entry.samples += batch;
        }
    }

    pub fn merge(&mut self, other: &FiringStats) {
        for (name, f) in &other.layers {
            let entry = self.layers.entry(name.clone()).or_default();
            entry.input_sum += f.input_sum;
            entry.elements += f.elements;
            entry.non_binary += f.non_binary;
            entry.max_input = entry.max_input.max(f.max_input);
            entry.samples += f.samples;
        }
    }
}

/// Firing statistics of one forward pass's records.
pub fn record_firing(records: &[ConvRecord], batch: u64) -> FiringStats {
    let mut stats = FiringStats::default();
    stats.record(records, batch);
    stats
}

/// Runs `net` over each batch in inference mode and accumulates the input
/// statistics of every convolution.
pub fn measure_firing<S: Scalar>(net: &mut Network<S>, batches: &[Input<S>], steps: usize) -> Result<FiringStats> {
    let opts = ForwardOptions { record: true, ..ForwardOptions::infer(steps) };
    let mut stats = FiringStats::default();
    for input in batches {
        let batch = match input {
            Input::Static(t) => t.shape()[0],
            Input::Sequence(t) => t.shape()[0] / steps.max(1),
        };
        let pass = net.forward(input, &opts)?;
        stats.record(&pass.records, batch as u64);
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    Ac,
    Mac,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyOptions {
    /// Leave the encoding convolution out of both totals.
    pub exclude_encode: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub block: String,
    pub role: LayerRole,
    pub class: OpClass,
    pub op_capacity: u64,
    pub fr: f64,
    pub pj: f64,
    pub ann_pj: f64,
    /// False for layers left out of the totals.
    pub included: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEnergy {
    pub block: String,
    pub pj: f64,
    pub ann_pj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub steps: usize,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub layers: Vec<LayerEnergy>,
    pub blocks: Vec<BlockEnergy>,
    pub total_pj: f64,
    /// Same layers as multiply-accumulates at a single time step.
    pub ann_total_pj: f64,
    /// `ann_total_pj / total_pj`; absent when the network spends nothing.
    pub ratio: Option<f64>,
}

/// Energy per image: `T·(fr·E_AC·OP)` for convolutions fed with spikes and
/// `T·E_MAC·OP` for the rest. A spike-fed convolution whose recorded input
/// was not binary is charged as multiply-accumulate.
pub fn estimate_energy(counts: &OpCount, stats: &FiringStats, steps: usize, opts: &EnergyOptions) -> Result<EnergyReport> {
    if steps == 0 {
        return Err(Error::Config("time steps must be at least 1".into()));
    }
    let t = steps as f64;
    let mut layers = Vec::with_capacity(counts.layers.len());
    let mut blocks: Vec<BlockEnergy> = Vec::new();
    let (mut total, mut ann_total) = (0.0, 0.0);
    for l in &counts.layers {
        let firing = stats
            .layers
            .get(&l.name)
            .ok_or_else(|| Error::Data(format!("no firing statistics for layer {}", l.name)))?;
        let fr = firing.rate();
        let op = l.op_capacity as f64;
        let class = match l.role {
            LayerRole::SpikeFed if firing.is_binary() => OpClass::Ac,
            _ => OpClass::Mac,
        };
        let pj = match class {
            OpClass::Ac => t * fr * E_AC_PJ * op,
            OpClass::Mac => t * E_MAC_PJ * op,
        };
        let ann_pj = E_MAC_PJ * op;
        let included = !(opts.exclude_encode && l.role == LayerRole::Encode);
        if included {
            total += pj;
            ann_total += ann_pj;
            match blocks.last_mut() {
                Some(b) if b.block == l.block => {
                    b.pj += pj;
                    b.ann_pj += ann_pj;
                }
                _ => blocks.push(BlockEnergy { block: l.block.clone(), pj, ann_pj }),
            }
        }
        layers.push(LayerEnergy {
            name: l.name.clone(),
            block: l.block.clone(),
            role: l.role,
            class,
            op_capacity: l.op_capacity,
            fr,
            pj,
            ann_pj,
            included,
        });
    }
    Ok(EnergyReport {
        steps,
        e_mac_pj: E_MAC_PJ,
        e_ac_pj: E_AC_PJ,
        layers,
        blocks,
        total_pj: total,
        ann_total_pj: ann_total,
        ratio: (total > 0.0).then(|| ann_total / total),
    })
}

fn role_tag(role: LayerRole) -> &'static str {
    match role {
        LayerRole::Encode => "encode",
        LayerRole::SpikeFed => "spike_fed",
        LayerRole::MembraneFed => "membrane_fed",
    }
}

impl EnergyReport {
    /// Layers classified as multiply-accumulate other than the encoding and
    /// membrane-fed ones, i.e. convolutions that were meant to see spikes.
    pub fn unexpected_mac_layers(&self) -> Vec<&LayerEnergy> {
        self.layers.iter().filter(|l| l.class == OpClass::Mac && l.role == LayerRole::SpikeFed).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per layer, then `total` and `ann_total` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,block,tag,class,op_capacity,fr,pj,included\n");
        for l in &self.layers {
            let class = match l.class {
                OpClass::Ac => "ac",
                OpClass::Mac => "mac",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                l.name,
                l.block,
                role_tag(l.role),
                class,
                l.op_capacity,
                l.fr,
                l.pj,
                l.included
            );
        }
        let _ = writeln!(out, "total,,,,,,{},", self.total_pj);
        let _ = writeln!(out, "ann_total,,,,,,{},", self.ann_total_pj);
        if let Some(r) = self.ratio {
            let _ = writeln!(out, "ratio,,,,,,{r},");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{BlockFamily, NetworkSpec};
    use crate::spiking::{LifConfig, TdbnConfig};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn table(entries: &[(&str, LayerRole, u64, f64, u64)]) -> (OpCount, FiringStats) {
        let mut counts = OpCount::default();
        let mut stats = FiringStats::default();
        for &(name, role, op, fr, non_binary) in entries {
            counts.layers.push(LayerOps { name: name.into(), block: "b".into(), role, op_capacity: op });
            stats.layers.insert(
                name.into(),
                LayerFiring { input_sum: fr * 1000.0, elements: 1000, non_binary, max_input: 1.0, samples: 1 },
            );
        }
        (counts, stats)
    }

    #[test]
    fn energy_examples() {
        let (c, s) = table(&[("a", LayerRole::SpikeFed, 10_000, 0.25, 0)]);
        let r = estimate_energy(&c, &s, 4, &EnergyOptions::default()).unwrap();
        assert!((r.total_pj - 9_000.0).abs() < 1e-9);
        let (c, s) = table(&[("a", LayerRole::MembraneFed, 10_000, 0.25, 0)]);
        let r = estimate_energy(&c, &s, 4, &EnergyOptions::default()).unwrap();
        assert!((r.total_pj - 184_000.0).abs() < 1e-9);
        assert!((r.ann_total_pj - 46_000.0).abs() < 1e-9);
        let (c, s) = table(&[("a", LayerRole::SpikeFed, 10_000, 0.0, 0)]);
        let r = estimate_energy(&c, &s, 4, &EnergyOptions::default()).unwrap();
        assert_eq!(r.total_pj, 0.0);
        assert_eq!(r.ratio, None);
    }

    #[test]
    fn non_binary_spike_input_is_charged_as_mac() {
        let (c, s) = table(&[("a", LayerRole::SpikeFed, 100, 0.5, 3)]);
        let r = estimate_energy(&c, &s, 2, &EnergyOptions::default()).unwrap();
        assert_eq!(r.layers[0].class, OpClass::Mac);
        assert!((r.total_pj - 2.0 * 4.6 * 100.0).abs() < 1e-9);
        assert_eq!(r.unexpected_mac_layers().len(), 1);
    }

    #[test]
    fn missing_stats_and_encode_exclusion() {
        let (c, mut s) = table(&[("enc", LayerRole::Encode, 100, 0.5, 10), ("a", LayerRole::SpikeFed, 100, 0.5, 0)]);
        let all = estimate_energy(&c, &s, 1, &EnergyOptions::default()).unwrap();
        let no_enc = estimate_energy(&c, &s, 1, &EnergyOptions { exclude_encode: true }).unwrap();
        assert!((all.total_pj - no_enc.total_pj - 460.0).abs() < 1e-9);
        assert!(!no_enc.layers[0].included);
        s.layers.remove("a");
        assert!(estimate_energy(&c, &s, 1, &EnergyOptions::default()).is_err());
    }

    #[test]
    fn capacity_examples() {
        let rec = |k, cin, cout, out| ConvRecord {
            name: "c".into(),
            block: "b".into(),
            role: LayerRole::SpikeFed,
            k,
            cin,
            cout,
            out_h: out,
            out_w: out,
            input_sum: 0.0,
            input_count: 1,
            non_binary: 0,
            max_input: 0.0,
        };
        assert_eq!(rec(3, 32, 64, 8).op_capacity(), 1_179_648);
        assert_eq!(rec(1, 16, 16, 4).op_capacity(), 4_096);
    }

    #[test]
    fn firing_rate_fixture() {
        let mut spikes = [0.0f32; 12];
        spikes[1] = 1.0;
        spikes[5] = 1.0;
        spikes[11] = 1.0;
        let rec = ConvRecord {
            name: "c".into(),
            block: "b".into(),
            role: LayerRole::SpikeFed,
            k: 1,
            cin: 3,
            cout: 1,
            out_h: 2,
            out_w: 2,
            input_sum: spikes.iter().map(|&v| f64::from(v)).sum(),
            input_count: 12,
            non_binary: 0,
            max_input: 1.0,
        };
        assert_eq!(record_firing(std::slice::from_ref(&rec), 1).layers["c"].rate(), 0.25);
        let zero = ConvRecord { input_sum: 0.0, ..rec.clone() };
        assert_eq!(record_firing(&[zero], 1).layers["c"].rate(), 0.0);
        let ones = ConvRecord { input_sum: 12.0, ..rec.clone() };
        let mut merged = record_firing(&[ones], 1);
        assert_eq!(merged.layers["c"].rate(), 1.0);
        merged.merge(&record_firing(&[rec], 1));
        assert_eq!(merged.layers["c"].rate(), 0.625);
        assert_eq!(merged.layers["c"].samples, 2);
    }

    /// Straight re-evaluation of the energy formula from the report fields.
    fn recompute(r: &EnergyReport) -> f64 {
        let mut total = 0.0;
        for l in r.layers.iter().filter(|l| l.included) {
            total += match l.class {
                OpClass::Ac => r.steps as f64 * l.fr * r.e_ac_pj * l.op_capacity as f64,
                OpClass::Mac => r.steps as f64 * r.e_mac_pj * l.op_capacity as f64,
            };
        }
        total
    }

    fn network_report(family: BlockFamily) -> EnergyReport {
        let spec = NetworkSpec { family, ..NetworkSpec::default() };
        let mut net = Network::<f32>::new(&spec, LifConfig::default(), TdbnConfig::default(), 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[2, 3, 64, 64], |_| rng.random_range(0.0..1.0f32));
        let stats = measure_firing(&mut net, &[Input::Static(x)], 2).unwrap();
        let counts = count_ops(&net, 64, 64).unwrap();
        estimate_energy(&counts, &stats, 2, &EnergyOptions::default()).unwrap()
    }

    #[test]
    fn full_spike_network_has_no_extra_mac_layers() {
        let ems = network_report(BlockFamily::Ems);
        assert!(ems.unexpected_mac_layers().is_empty());
        assert_eq!(recompute(&ems), ems.total_pj);
        let blocks: f64 = ems.blocks.iter().map(|b| b.pj).sum();
        assert!((blocks - ems.total_pj).abs() <= 1e-9 * ems.total_pj);
        assert!(ems.ratio.unwrap() > 1.0);
        for family in [BlockFamily::Ms, BlockFamily::Sew] {
            let r = network_report(family);
            assert!(!r.unexpected_mac_layers().is_empty(), "{family:?}");
            assert_eq!(recompute(&r), r.total_pj);
        }
    }

    #[test]
    fn report_outputs() {
        let (c, s) = table(&[("a", LayerRole::SpikeFed, 10, 0.5, 0)]);
        let r = estimate_energy(&c, &s, 1, &EnergyOptions::default()).unwrap();
        let back: EnergyReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert!(csv.starts_with("layer,block,tag,class,op_capacity,fr,pj,included\na,b,spike_fed,ac,10,0.5,4.5,true\n"));
        assert!(csv.contains("ratio,,,,,,"));
    }

    proptest! {
        #[test]
        fn energy_grows_with_firing_rate(fr in 0.0..0.9f64, bump in 0.01..0.1f64, op in 1u64..1_000_000, steps in 1usize..8) {
            let (c, s) = table(&[("a", LayerRole::SpikeFed, op, fr, 0)]);
            let (_, s2) = table(&[("a", LayerRole::SpikeFed, op, fr + bump, 0)]);
            let lo = estimate_energy(&c, &s, steps, &EnergyOptions::default()).unwrap();
            let hi = estimate_energy(&c, &s2, steps, &EnergyOptions::default()).unwrap();
            prop_assert!(hi.total_pj > lo.total_pj);
            prop_assert_eq!(recompute(&lo), lo.total_pj);
        }
    }
}
