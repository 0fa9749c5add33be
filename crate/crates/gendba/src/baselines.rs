//! The four reference scheduling strategies: OS default (first touch on
//! node 0), OS interleave, shared-everything-per-node, and shared-nothing
//! with scheduling bound to placement. All are pure functions of the
//! hardware profile and slice count.

use crate::error::{Error, Result};
use crate::sim::{first_touch_policy, HardwareProfile, SchedulingPolicy};

/// Stable CLI names of the four baselines.
pub const BASELINE_NAMES: [&str; 4] = ["os-d", "os-i", "se-n", "sn-n"];

pub fn by_name(name: &str, hw: &HardwareProfile, slices: usize) -> Result<SchedulingPolicy> {
    match name {
        "os-d" => Ok(os_default(hw, slices)),
        "os-i" => Ok(os_interleave(hw, slices)),
        "se-n" => Ok(se_numa(hw, slices)),
        "sn-n" => Ok(sn_numa(hw, slices)),
        _ => Err(Error::Arg(format!("unknown baseline '{name}'"))),
    }
}

/// OS:D — first-touch emulation: all slices round-robin over node 0's cores
/// (a single loader thread with OS migration off).
pub fn os_default(hw: &HardwareProfile, slices: usize) -> SchedulingPolicy {
    first_touch_policy(hw, slices)
}

/// OS:I — slice i goes to node (i mod N); cores round-robin within a node
/// in core-ID order.
pub fn os_interleave(hw: &HardwareProfile, slices: usize) -> SchedulingPolicy {
    let nodes = hw.nodes();
    let mut next_in_node = vec![0usize; nodes];
    let assignment = (0..slices)
        .map(|s| {
            let node = s % nodes;
            let cores: Vec<usize> = hw.cores_of_node(node).collect();
            let core = cores[next_in_node[node] % cores.len()];
            next_in_node[node] += 1;
            core
        })
        .collect();
    SchedulingPolicy::new(assignment)
}

fn block_node(slice: usize, slices: usize, nodes: usize) -> (usize, usize, usize) {
    // Contiguous blocks of ceil(S/N) slices per node.
    let block = slices.div_ceil(nodes);
    let node = (slice / block).min(nodes - 1);
    let within = slice - node * block;
    (node, within, block)
}

/// SE:N — contiguous slice blocks per node; execution core round-robin over
/// the whole node (a stand-in for the OS scheduling freely within a socket).
pub fn se_numa(hw: &HardwareProfile, slices: usize) -> SchedulingPolicy {
    let nodes = hw.nodes();
    let assignment = (0..slices)
        .map(|s| {
            let (node, within, _) = block_node(s, slices, nodes);
            let cores: Vec<usize> = hw.cores_of_node(node).collect();
            cores[within % cores.len()]
        })
        .collect();
    SchedulingPolicy::new(assignment)
}

/// SN:N — same node blocks as SE:N, but each slice is pinned to one
/// dedicated core: a node's slices are partitioned evenly over its cores in
/// stable order, so the schedule strictly follows the placement.
pub fn sn_numa(hw: &HardwareProfile, slices: usize) -> SchedulingPolicy {
    let nodes = hw.nodes();
    let assignment = (0..slices)
        .map(|s| {
            let (node, within, block) = block_node(s, slices, nodes);
            let cores: Vec<usize> = hw.cores_of_node(node).collect();
            let sub = block.div_ceil(cores.len());
            cores[(within / sub).min(cores.len() - 1)]
        })
        .collect();
    SchedulingPolicy::new(assignment)
}
