//! Dead-structure propagation.
//!
//! An output channel whose incoming kernels are all masked is dead; every
//! kernel in the next layer that reads a dead channel is masked in turn. On
//! the capsule layer, a capsule type dies when all of its channels are dead,
//! which removes `grid_size` capsules and their routing weights.

use super::{Granularity, LayerMask};
use crate::capsnet::CapsNetSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
}

impl LayerShape {
    pub fn kernels(&self) -> usize {
        self.out_channels * self.in_channels
    }
}

/// How pruned conv layers connect to the capsule and routing layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetTopology {
    pub layers: Vec<LayerShape>,
    /// Channels per capsule type in the last layer.
    pub caps_dim: usize,
    /// Capsules per capsule type (the PrimaryCaps grid).
    pub grid_size: usize,
    /// Routing weights owned by one input capsule.
    pub routing_params_per_capsule: usize,
}

impl NetTopology {
    pub fn from_spec(spec: &CapsNetSpec) -> Self {
        NetTopology {
            layers: vec![
                LayerShape {
                    name: "conv1".into(),
                    out_channels: spec.conv1.out_channels,
                    in_channels: spec.input_channels,
                    kernel_size: spec.conv1.kernel,
                },
                LayerShape {
                    name: "primary".into(),
                    out_channels: spec.primary_channels(),
                    in_channels: spec.conv1.out_channels,
                    kernel_size: spec.primary.kernel,
                },
            ],
            caps_dim: spec.primary.caps_dim,
            grid_size: spec.grid_size(),
            routing_params_per_capsule: spec.params_per_capsule(),
        }
    }

    pub fn capsule_types(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels / self.caps_dim)
    }

    pub fn capsules(&self) -> usize {
        self.capsule_types() * self.grid_size
    }
}

/// Effective structure after propagation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadStructure {
    /// Kernel-granularity masks including propagated deaths.
    pub kernel_masks: Vec<LayerMask>,
    /// Surviving output channels per layer, ascending.
    pub live_channels: Vec<Vec<u32>>,
    /// Surviving capsule types, ascending.
    pub live_capsule_types: Vec<u32>,
    /// Sweeps that changed at least one kernel.
    pub iterations: usize,
    grid_size: usize,
    routing_params_per_capsule: usize,
}

impl DeadStructure {
    pub fn surviving_capsules(&self) -> usize {
        self.live_capsule_types.len() * self.grid_size
    }

    pub fn routing_weight_count(&self) -> usize {
        self.surviving_capsules() * self.routing_params_per_capsule
    }

    /// One bit per original input capsule (`type·grid + position`).
    pub fn routing_capsule_mask(&self, capsule_types: usize) -> Vec<bool> {
        let mut alive = vec![false; capsule_types * self.grid_size];
        for &t in &self.live_capsule_types {
            let t = t as usize;
            alive[t * self.grid_size..(t + 1) * self.grid_size].fill(true);
        }
        alive
    }

    pub fn is_channel_live(&self, layer: usize, channel: usize) -> bool {
        self.live_channels[layer].binary_search(&(channel as u32)).is_ok()
    }

    /// The architecture with dead conv1 channels and dead capsule types
    /// removed.
    pub fn reduced_spec(&self, spec: &CapsNetSpec) -> CapsNetSpec {
        let mut out = *spec;
        out.conv1.out_channels = self.live_channels[0].len();
        out.primary.capsule_types = self.live_capsule_types.len();
        out
    }
}

pub fn propagate_dead_structures(masks: &[LayerMask], topology: &NetTopology) -> Result<DeadStructure> {
    if masks.len() != topology.layers.len() {
        return Err(Error::shape(format!(
            "{} masks for {} layers",
            masks.len(),
            topology.layers.len()
        )));
    }
    let mut tables: Vec<Vec<bool>> = masks
        .iter()
        .zip(&topology.layers)
        .map(|(m, l)| m.kernel_table(l.out_channels, l.in_channels))
        .collect::<Result<_>>()?;

    let dead_outputs = |table: &[bool], shape: &LayerShape| -> Vec<bool> {
        (0..shape.out_channels)
            .map(|o| {
                !table[o * shape.in_channels..(o + 1) * shape.in_channels]
                    .iter()
                    .any(|&a| a)
            })
            .collect()
    };

    let mut iterations = 0;
    loop {
        let mut changed = false;
        for i in 0..tables.len().saturating_sub(1) {
            let dead = dead_outputs(&tables[i], &topology.layers[i]);
            let next = &topology.layers[i + 1];
            for o in 0..next.out_channels {
                for (c, _) in dead.iter().enumerate().filter(|(_, &d)| d) {
                    let k = o * next.in_channels + c;
                    if tables[i + 1][k] {
                        tables[i + 1][k] = false;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
        iterations += 1;
    }

    let mut live_channels = Vec::with_capacity(tables.len());
    for (table, shape) in tables.iter().zip(&topology.layers) {
        let live: Vec<u32> = dead_outputs(table, shape)
            .iter()
            .enumerate()
            .filter(|(_, &d)| !d)
            .map(|(o, _)| o as u32)
            .collect();
        if live.is_empty() {
            return Err(Error::NetworkSevered {
                layer: shape.name.clone(),
            });
        }
        live_channels.push(live);
    }

    let last = live_channels.last().expect("at least one layer");
    let caps_dim = topology.caps_dim as u32;
    let mut live_capsule_types: Vec<u32> = last.iter().map(|&c| c / caps_dim).collect();
    live_capsule_types.dedup();

    let kernel_masks = masks
        .iter()
        .zip(tables)
        .map(|(m, t)| LayerMask::from_units(m.name(), Granularity::Kernel, t))
        .collect();

    Ok(DeadStructure {
        kernel_masks,
        live_channels,
        live_capsule_types,
        iterations,
        grid_size: topology.grid_size,
        routing_params_per_capsule: topology.routing_params_per_capsule,
    })
}

/// Structural size accounting of a pruned network.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub conv_weights_total: u64,
    pub conv_weights_surviving: u64,
    pub routing_weights_total: u64,
    pub routing_weight_count: u64,
    pub survived_weight_pct: f64,
    pub capsules_total: usize,
    pub survived_capsules: usize,
    /// Entries in the surviving-unit index tables.
    pub index_entries: u64,
    /// `index_entries` as a percentage of surviving weights.
    pub index_overhead_pct: f64,
}

impl CompressionReport {
    pub fn surviving_weights(&self) -> u64 {
        self.conv_weights_surviving + self.routing_weight_count
    }

    pub fn total_weights(&self) -> u64 {
        self.conv_weights_total + self.routing_weights_total
    }

    /// `key=value` lines.
    pub fn to_kv_lines(&self) -> Vec<String> {
        vec![
            format!(
                "conv_weights={}/{}",
                self.conv_weights_surviving, self.conv_weights_total
            ),
            format!(
                "routing_weights={}/{}",
                self.routing_weight_count, self.routing_weights_total
            ),
            format!("survived_weight_pct={:.4}", self.survived_weight_pct),
            format!("survived_capsules={}", self.survived_capsules),
            format!("routing_weight_count={}", self.routing_weight_count),
            format!("index_entries={}", self.index_entries),
            format!("index_overhead_pct={:.4}", self.index_overhead_pct),
        ]
    }
}

pub fn compression_report(masks: &[LayerMask], spec: &CapsNetSpec) -> Result<CompressionReport> {
    let topology = NetTopology::from_spec(spec);
    let dead = propagate_dead_structures(masks, &topology)?;
    let mut conv_total = 0u64;
    let mut conv_surviving = 0u64;
    for (shape, m) in topology.layers.iter().zip(&dead.kernel_masks) {
        let area = (shape.kernel_size * shape.kernel_size) as u64;
        conv_total += shape.kernels() as u64 * area;
        conv_surviving += m.survivors() as u64 * area;
    }
    let routing_total = (topology.capsules() * topology.routing_params_per_capsule) as u64;
    let routing_surviving = dead.routing_weight_count() as u64;
    let index_entries: u64 = masks.iter().map(|m| m.survivors() as u64).sum();
    let surviving = conv_surviving + routing_surviving;
    let pct = |num: u64, den: u64| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    Ok(CompressionReport {
        conv_weights_total: conv_total,
        conv_weights_surviving: conv_surviving,
        routing_weights_total: routing_total,
        routing_weight_count: routing_surviving,
        survived_weight_pct: pct(surviving, conv_total + routing_total),
        capsules_total: topology.capsules(),
        survived_capsules: dead.surviving_capsules(),
        index_entries,
        index_overhead_pct: pct(index_entries, surviving),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_masks() -> Vec<LayerMask> {
        vec![
            LayerMask::all_alive("conv1", Granularity::Kernel, 256),
            LayerMask::all_alive("primary", Granularity::CapsuleGroup, 32),
        ]
    }

    fn keep_types(n: usize) -> Vec<LayerMask> {
        let mut m = mnist_masks();
        for t in n..32 {
            m[1].kill(t);
        }
        m
    }

    #[test]
    fn all_alive_leaves_spec_unchanged() {
        let spec = CapsNetSpec::mnist();
        let dead = propagate_dead_structures(&mnist_masks(), &NetTopology::from_spec(&spec)).unwrap();
        assert_eq!(dead.reduced_spec(&spec), spec);
        assert_eq!(dead.iterations, 0);
        let r = compression_report(&mnist_masks(), &spec).unwrap();
        assert_eq!(r.routing_weight_count, 1_474_560);
        assert_eq!(r.survived_capsules, 1152);
        assert_eq!(r.survived_weight_pct, 100.0);
    }

    #[test]
    fn one_dead_type() {
        let spec = CapsNetSpec::mnist();
        let r = compression_report(&keep_types(31), &spec).unwrap();
        assert_eq!(r.survived_capsules, 1116);
        assert_eq!(1_474_560 - r.routing_weight_count, 36 * 1280);
    }

    #[test]
    fn paper_capsule_counts() {
        let spec = CapsNetSpec::mnist();
        for (types, caps, routing) in [(7, 252, 322_560), (12, 432, 552_960)] {
            let r = compression_report(&keep_types(types), &spec).unwrap();
            assert_eq!(r.survived_capsules, caps);
            assert_eq!(r.routing_weight_count, routing);
            assert_eq!(routing, caps as u64 * 1280);
        }
    }

    #[test]
    fn dead_conv1_channel_masks_consumers() {
        let spec = CapsNetSpec::mnist();
        let mut masks = mnist_masks();
        masks[0].kill(3);
        let dead = propagate_dead_structures(&masks, &NetTopology::from_spec(&spec)).unwrap();
        assert_eq!(dead.iterations, 1);
        assert!(!dead.is_channel_live(0, 3));
        let primary = &dead.kernel_masks[1];
        for o in 0..256 {
            assert!(!primary.is_alive(o * 256 + 3));
            assert!(primary.is_alive(o * 256 + 4));
        }
        assert_eq!(dead.reduced_spec(&spec).conv1.out_channels, 255);
    }

    #[test]
    fn kernel_mask_killing_type_channels() {
        let spec = CapsNetSpec::mnist();
        // kill every kernel feeding channels 8..16 (capsule type 1)
        let mut primary = LayerMask::all_alive("primary", Granularity::Kernel, 256 * 256);
        for o in 8..16 {
            for c in 0..256 {
                primary.kill(o * 256 + c);
            }
        }
        let masks = vec![LayerMask::all_alive("conv1", Granularity::Kernel, 256), primary];
        let dead = propagate_dead_structures(&masks, &NetTopology::from_spec(&spec)).unwrap();
        assert_eq!(dead.surviving_capsules(), 1116);
        assert!(!dead.live_capsule_types.contains(&1));
    }

    #[test]
    fn severed_network() {
        let spec = CapsNetSpec::mnist();
        let masks = vec![
            LayerMask::from_units("conv1", Granularity::Kernel, vec![false; 256]),
            LayerMask::all_alive("primary", Granularity::CapsuleGroup, 32),
        ];
        let err = propagate_dead_structures(&masks, &NetTopology::from_spec(&spec)).unwrap_err();
        assert!(matches!(err, Error::NetworkSevered { ref layer } if layer == "conv1"));
    }

    #[test]
    fn index_overhead_small_for_group_pruning() {
        let r = compression_report(&keep_types(7), &CapsNetSpec::mnist()).unwrap();
        assert_eq!(r.index_entries, 256 + 7);
        assert!(r.index_overhead_pct <= 0.5);
    }
}
