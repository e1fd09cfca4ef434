use super::network::{ForwardOptions, Input, Network};
use super::LayerRole;
use crate::error::Result;
use crate::tensor::Scalar;

/// A spike-fed convolution that received values other than 0 and 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub conv: String,
    pub block: String,
    /// Number of offending input elements summed over all probes.
    pub non_binary: u64,
    pub max_input: f64,
}

/// Runs every probe through the network and lists each spike-fed conv whose
/// input was ever non-binary. Encoding and readout convs are exempt.
pub fn full_spike_audit<S: Scalar>(net: &mut Network<S>, probes: &[Input<S>], steps: usize) -> Result<Vec<Violation>> {
    let mut violations: Vec<Violation> = Vec::new();
    for probe in probes {
        let pass = net.forward(probe, &ForwardOptions::probe(steps))?;
        for rec in pass.records.iter().filter(|r| r.role == LayerRole::SpikeFed && !r.is_binary()) {
            match violations.iter_mut().find(|v| v.conv == rec.name) {
                Some(v) => {
                    v.non_binary += rec.non_binary;
                    v.max_input = v.max_input.max(rec.max_input);
                }
                None => violations.push(Violation {
                    conv: rec.name.clone(),
                    block: rec.block.clone(),
                    non_binary: rec.non_binary,
                    max_input: rec.max_input,
                }),
            }
        }
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{BlockFamily, BlockKind, BlockSpec, NetworkSpec};
    use crate::spiking::{LifConfig, TdbnConfig};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn probes(n: usize, shape: &[usize], seed: u64) -> Vec<Input<f32>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Input::Static(Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0)))).collect()
    }

    fn audit(family: BlockFamily) -> Vec<Violation> {
        let spec = NetworkSpec { family, ..NetworkSpec::default() };
        let mut net = Network::<f32>::new(&spec, LifConfig::default(), TdbnConfig::default(), 0).unwrap();
        full_spike_audit(&mut net, &probes(3, &[2, 3, 64, 64], 1), 2).unwrap()
    }

    #[test]
    fn ems_network_is_full_spike() {
        assert!(audit(BlockFamily::Ems).is_empty());
    }

    #[test]
    fn ms_network_has_membrane_fed_shortcuts() {
        let v = audit(BlockFamily::Ms);
        assert!(v.iter().any(|v| v.conv.ends_with("short.conv")));
        assert!(v.iter().all(|v| v.conv.ends_with("short.conv")));
    }

    #[test]
    fn sew_network_feeds_spike_sums() {
        let v = audit(BlockFamily::Sew);
        assert!(v.iter().any(|v| v.max_input == 2.0 || v.max_input > 1.0));
    }

    #[test]
    fn sew_block_outputs_reach_two() {
        let spec = BlockSpec::new(BlockKind::Sew, 4, 4, 1);
        let mut net = Network::<f32>::chain(&[("b".into(), spec)], LifConfig::default(), TdbnConfig::default(), 0).unwrap();
        let ones = Tensor::<f32>::ones(&[2, 4, 6, 6]);
        let pass = net.forward(&Input::Sequence(ones), &ForwardOptions::probe(2)).unwrap();
        let out = pass.graph.value(pass.features);
        assert!(out.data().contains(&2.0));
        assert!(out.data().iter().all(|&v| v == 1.0 || v == 2.0));
    }
}
