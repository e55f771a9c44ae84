//! Analytic cycle-cost model of the routing accelerator.
//!
//! Two schedules are costed for one inference, with `N` input capsules, `J`
//! output capsules of dimension `K`, capsule dimension `D` and `R` routing
//! iterations:
//!
//! | step            | baseline (scalar, sequential)       | optimized (PE array)                            |
//! |-----------------|-------------------------------------|-------------------------------------------------|
//! | FullyConnected  | `N·J·K·D · mac`                     | `array(N·J·K·D)`                                |
//! | Softmax         | `R·N·(2(J−1)·cmp/add + J·sub + J·exp_b + J·div_b)` | `R·N·softmax_pe(J)`              |
//! | WeightedSum     | `R·N·J·K · mac`                     | `R·array(N·J·K)`                                |
//! | Squash          | `R·J·squash(div_b)`                 | `R·J·squash(div_o)`                             |
//! | Agreement       | `U·N·J·K · mac`                     | `U·(J·K·⌈N/fact⌉·ii + mac)`                    |
//!
//! `U` is `R−1`, or `R` when the last update is kept.
//!
//! `array(m)` issues `m` MACs in dispatches of `pe_count·mac_width`; each
//! dispatch takes `mac + ⌈log2 mac_width⌉·add` cycles (multiply then adder
//! tree). Pipelined, a new dispatch issues every `ii` cycles; otherwise
//! dispatches run back to back.
//!
//! `softmax_pe(J)`: max reduction, subtraction, exp, sum reduction and
//! division for one row, with `J` spread over the PEs in `⌈J/pe_count⌉`
//! waves. A reduction over `J` values on `P` PEs costs
//! `⌈J/P⌉ − 1 + ⌈log2 min(J, P)⌉` steps.
//!
//! `squash(div)`: `K` squares, `K` adds, a square root, one division and `K`
//! scaling multiplies, always on the scalar path.
//!
//! Agreement dispatches `fact` input capsules (one per PE) per `(j, k)`;
//! `fact` is the largest divisor of `N` not above `min(fact, pe_count)`.
//!
//! Convolutions cost `array(surviving MACs)` in both schedules. Memory
//! transfers are not modeled.

use std::fmt;

use crate::capsnet::{pe_batch, CapsNetSpec};
use crate::error::{Error, Result};
use crate::pruning::DeadStructure;

/// Cycles per primitive operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostTable {
    pub exp_baseline: u64,
    pub exp_optimized: u64,
    pub div_baseline: u64,
    pub div_optimized: u64,
    pub mul: u64,
    pub add: u64,
    pub mac: u64,
    pub cmp: u64,
    pub sqrt: u64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            exp_baseline: 27,
            exp_optimized: 14,
            div_baseline: 49,
            div_optimized: 36,
            mul: 1,
            add: 1,
            mac: 1,
            cmp: 1,
            sqrt: 18,
        }
    }
}

impl CostTable {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.exp_baseline,
            self.exp_optimized,
            self.div_baseline,
            self.div_optimized,
            self.mul,
            self.add,
            self.mac,
            self.cmp,
            self.sqrt,
        ];
        if all.contains(&0) {
            return Err(Error::InvalidArgument(
                "every primitive costs at least one cycle".into(),
            ));
        }
        if self.exp_optimized >= self.exp_baseline || self.div_optimized >= self.div_baseline {
            return Err(Error::InvalidArgument(
                "optimized exp and div must be cheaper than the baselines".into(),
            ));
        }
        Ok(())
    }

    /// Sets a cost by name (`exp_baseline`, `mac`, ...).
    pub fn set(&mut self, name: &str, cycles: u64) -> Result<()> {
        let slot = match name {
            "exp_baseline" => &mut self.exp_baseline,
            "exp_optimized" => &mut self.exp_optimized,
            "div_baseline" => &mut self.div_baseline,
            "div_optimized" => &mut self.div_optimized,
            "mul" => &mut self.mul,
            "add" => &mut self.add,
            "mac" => &mut self.mac,
            "cmp" => &mut self.cmp,
            "sqrt" => &mut self.sqrt,
            _ => return Err(Error::InvalidArgument(format!("unknown primitive `{name}`"))),
        };
        *slot = cycles;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PEArraySpec {
    pub pe_count: usize,
    /// Multiplies per PE per dispatch, summed by an adder tree.
    pub mac_width: usize,
    pub pipeline_ii: u64,
    pub pipelined: bool,
}

impl Default for PEArraySpec {
    fn default() -> Self {
        PEArraySpec {
            pe_count: 10,
            mac_width: 9,
            pipeline_ii: 1,
            pipelined: true,
        }
    }
}

impl PEArraySpec {
    pub fn validate(&self) -> Result<()> {
        if self.pe_count == 0 || self.mac_width == 0 || self.pipeline_ii == 0 {
            return Err(Error::InvalidArgument(
                "pe_count, mac_width and pipeline_ii must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Cycles for `stages` issues of a unit with the given latency.
    fn issue(&self, stages: u64, latency: u64) -> u64 {
        match stages {
            0 => 0,
            n if self.pipelined => latency + (n - 1) * self.pipeline_ii,
            n => n * latency,
        }
    }

    /// Latency of one dispatch: multiply, then the adder tree.
    pub fn dispatch_latency(&self, costs: &CostTable) -> u64 {
        costs.mac + ceil_log2(self.mac_width as u64) * costs.add
    }

    /// Cycles to run `macs` independent MACs on the array.
    pub fn array_cycles(&self, macs: u64, costs: &CostTable) -> u64 {
        let lanes = (self.pe_count * self.mac_width) as u64;
        self.issue(macs.div_ceil(lanes), self.dispatch_latency(costs))
    }

    fn reduce_steps(&self, n: u64) -> u64 {
        if n == 0 {
            return 0;
        }
        let p = self.pe_count as u64;
        n.div_ceil(p) - 1 + ceil_log2(n.min(p))
    }
}

pub fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        u64::from(64 - (n - 1).leading_zeros())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoutingStep {
    FullyConnected,
    Softmax,
    WeightedSum,
    Squash,
    Agreement,
}

impl RoutingStep {
    pub const ALL: [RoutingStep; 5] = [
        RoutingStep::FullyConnected,
        RoutingStep::Softmax,
        RoutingStep::WeightedSum,
        RoutingStep::Squash,
        RoutingStep::Agreement,
    ];

    pub fn key(self) -> &'static str {
        match self {
            RoutingStep::FullyConnected => "fully_connected",
            RoutingStep::Softmax => "softmax",
            RoutingStep::WeightedSum => "weighted_sum",
            RoutingStep::Squash => "squash",
            RoutingStep::Agreement => "agreement",
        }
    }
}

impl fmt::Display for RoutingStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingStep::FullyConnected => "FullyConnected",
            RoutingStep::Softmax => "Softmax",
            RoutingStep::WeightedSum => "WeightedSum",
            RoutingStep::Squash => "Squash",
            RoutingStep::Agreement => "Agreement",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Baseline,
    Optimized,
}

/// Routing shape parameters the model needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingShape {
    pub in_caps: u64,
    pub out_caps: u64,
    pub out_dim: u64,
    pub caps_dim: u64,
    pub iters: u64,
    pub updates: u64,
    /// Requested agreement batch; reduced to a divisor of `in_caps`.
    pub fact: usize,
}

impl RoutingShape {
    pub fn from_spec(spec: &CapsNetSpec, fact: usize) -> Self {
        let iters = spec.routing.iters as u64;
        RoutingShape {
            in_caps: spec.in_caps() as u64,
            out_caps: spec.digit.count as u64,
            out_dim: spec.digit.dim as u64,
            caps_dim: spec.primary.caps_dim as u64,
            iters,
            updates: if spec.routing.update_last_iteration {
                iters
            } else {
                iters.saturating_sub(1)
            },
            fact,
        }
    }
}

/// Per-capsule softmax row cost.
pub fn softmax_row_cycles(j: u64, costs: &CostTable, pe: &PEArraySpec, schedule: Schedule) -> u64 {
    match schedule {
        Schedule::Baseline => {
            let reduce = j.saturating_sub(1);
            reduce * costs.cmp + j * costs.add + j * costs.exp_baseline + reduce * costs.add + j * costs.div_baseline
        }
        Schedule::Optimized => {
            let waves = j.div_ceil(pe.pe_count as u64);
            let reduce = pe.reduce_steps(j);
            reduce * costs.cmp
                + waves * costs.add
                + pe.issue(waves, costs.exp_optimized)
                + reduce * costs.add
                + pe.issue(waves, costs.div_optimized)
        }
    }
}

fn squash_cycles(k: u64, costs: &CostTable, div: u64) -> u64 {
    k * costs.mul + k * costs.add + costs.sqrt + div + k * costs.mul
}

/// Agreement batch used by the optimized schedule.
pub fn agreement_fact(shape: &RoutingShape, pe: &PEArraySpec) -> usize {
    pe_batch(shape.in_caps as usize, shape.fact.min(pe.pe_count))
}

pub fn step_cycles(
    step: RoutingStep,
    shape: &RoutingShape,
    costs: &CostTable,
    pe: &PEArraySpec,
    schedule: Schedule,
) -> u64 {
    let RoutingShape {
        in_caps: n,
        out_caps: j,
        out_dim: k,
        caps_dim: d,
        iters: r,
        updates: u,
        ..
    } = *shape;
    let base = schedule == Schedule::Baseline;
    match step {
        RoutingStep::FullyConnected if base => n * j * k * d * costs.mac,
        RoutingStep::FullyConnected => pe.array_cycles(n * j * k * d, costs),
        RoutingStep::Softmax => r * n * softmax_row_cycles(j, costs, pe, schedule),
        RoutingStep::WeightedSum if base => r * n * j * k * costs.mac,
        RoutingStep::WeightedSum => r * pe.array_cycles(n * j * k, costs),
        RoutingStep::Squash => {
            let div = if base { costs.div_baseline } else { costs.div_optimized };
            r * j * squash_cycles(k, costs, div)
        }
        RoutingStep::Agreement if base => u * n * j * k * costs.mac,
        RoutingStep::Agreement => {
            let fact = agreement_fact(shape, pe) as u64;
            u * pe.issue(j * k * (n / fact), costs.mac)
        }
    }
}

/// Cycles per routing step for one schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingCycles {
    pub steps: Vec<(RoutingStep, u64)>,
}

impl RoutingCycles {
    pub fn total(&self) -> u64 {
        self.steps.iter().map(|(_, c)| c).sum()
    }

    pub fn get(&self, step: RoutingStep) -> u64 {
        self.steps.iter().find(|(s, _)| *s == step).map_or(0, |(_, c)| *c)
    }
}

pub fn routing_cycles(shape: &RoutingShape, costs: &CostTable, pe: &PEArraySpec, schedule: Schedule) -> RoutingCycles {
    RoutingCycles {
        steps: RoutingStep::ALL
            .iter()
            .map(|&s| (s, step_cycles(s, shape, costs, pe, schedule)))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRow {
    pub step: RoutingStep,
    pub baseline: u64,
    pub optimized: u64,
}

impl StepRow {
    /// Percent reduction from baseline to optimized.
    pub fn reduction_pct(&self) -> f64 {
        reduction_pct(self.baseline, self.optimized)
    }
}

fn reduction_pct(baseline: u64, optimized: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        100.0 * (baseline as f64 - optimized as f64) / baseline as f64
    }
}

/// Baseline and optimized routing latency side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    pub costs: CostTable,
    pub rows: Vec<StepRow>,
    /// Softmax cost of a single input capsule's row.
    pub softmax_row: (u64, u64),
}

pub fn routing_cycle_report(
    spec: &CapsNetSpec,
    costs: &CostTable,
    pe: &PEArraySpec,
    fact: usize,
) -> Result<CycleReport> {
    spec.validate()?;
    costs.validate()?;
    pe.validate()?;
    let shape = RoutingShape::from_spec(spec, fact);
    let base = routing_cycles(&shape, costs, pe, Schedule::Baseline);
    let opt = routing_cycles(&shape, costs, pe, Schedule::Optimized);
    let rows = RoutingStep::ALL
        .iter()
        .map(|&step| StepRow {
            step,
            baseline: base.get(step),
            optimized: opt.get(step),
        })
        .collect();
    let j = shape.out_caps;
    Ok(CycleReport {
        costs: *costs,
        rows,
        softmax_row: (
            softmax_row_cycles(j, costs, pe, Schedule::Baseline),
            softmax_row_cycles(j, costs, pe, Schedule::Optimized),
        ),
    })
}

impl CycleReport {
    pub fn row(&self, step: RoutingStep) -> StepRow {
        *self
            .rows
            .iter()
            .find(|r| r.step == step)
            .expect("every step is reported")
    }

    pub fn total_baseline(&self) -> u64 {
        self.rows.iter().map(|r| r.baseline).sum()
    }

    pub fn total_optimized(&self) -> u64 {
        self.rows.iter().map(|r| r.optimized).sum()
    }

    pub fn softmax_reduction_pct(&self) -> f64 {
        self.row(RoutingStep::Softmax).reduction_pct()
    }

    /// Primitive rows, e.g. `exp: 27 -> 14`.
    pub fn primitive_lines(&self) -> Vec<String> {
        vec![
            format!("exp: {} -> {}", self.costs.exp_baseline, self.costs.exp_optimized),
            format!("div: {} -> {}", self.costs.div_baseline, self.costs.div_optimized),
        ]
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("primitive cycles\n");
        for line in self.primitive_lines() {
            out.push_str(&format!("  {line}\n"));
        }
        out.push_str(&format!(
            "{:<16} {:>12} {:>12} {:>10}\n",
            "step", "baseline", "optimized", "reduction"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>12} {:>12} {:>9.2}%\n",
                r.step.to_string(),
                r.baseline,
                r.optimized,
                r.reduction_pct()
            ));
        }
        let (tb, to) = (self.total_baseline(), self.total_optimized());
        out.push_str(&format!(
            "{:<16} {:>12} {:>12} {:>9.2}%\n",
            "total",
            tb,
            to,
            reduction_pct(tb, to)
        ));
        out.push_str(&format!(
            "softmax row: {} -> {} cycles ({:.2}% reduction)\n",
            self.softmax_row.0,
            self.softmax_row.1,
            self.softmax_reduction_pct()
        ));
        out.push_str("only the exp and div primitive costs are measured figures; step costs are model-derived\n");
        out
    }

    /// `step=...;baseline=...;optimized=...` records, then primitives and
    /// totals.
    pub fn to_kv_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .rows
            .iter()
            .map(|r| {
                format!(
                    "step={};baseline={};optimized={}",
                    r.step.key(),
                    r.baseline,
                    r.optimized
                )
            })
            .collect();
        lines.push(format!(
            "step=total;baseline={};optimized={}",
            self.total_baseline(),
            self.total_optimized()
        ));
        lines.push(format!(
            "primitive=exp;baseline={};optimized={}",
            self.costs.exp_baseline, self.costs.exp_optimized
        ));
        lines.push(format!(
            "primitive=div;baseline={};optimized={}",
            self.costs.div_baseline, self.costs.div_optimized
        ));
        lines.push(format!("softmax_reduction_pct={:.2}", self.softmax_reduction_pct()));
        lines
    }
}

/// MACs of both conv layers, counting only surviving kernels.
pub fn conv_macs(spec: &CapsNetSpec, dead: Option<&DeadStructure>) -> u64 {
    let (h1, w1) = spec.conv1_hw();
    let (gh, gw) = spec.grid_hw();
    let k1 = (spec.conv1.kernel * spec.conv1.kernel) as u64;
    let kp = (spec.primary.kernel * spec.primary.kernel) as u64;
    let (conv1_kernels, primary_kernels) = match dead {
        Some(d) => (
            d.kernel_masks[0].survivors() as u64,
            d.kernel_masks[1].survivors() as u64,
        ),
        None => (
            (spec.conv1.out_channels * spec.input_channels) as u64,
            (spec.primary_channels() * spec.conv1.out_channels) as u64,
        ),
    };
    conv1_kernels * k1 * (h1 * w1) as u64 + primary_kernels * kp * (gh * gw) as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub conv_cycles: u64,
    pub routing_cycles: u64,
    pub fps: f64,
}

impl Throughput {
    pub fn total_cycles(&self) -> u64 {
        self.conv_cycles + self.routing_cycles
    }
}

/// Frames per second of one network configuration.
///
/// `dead` removes pruned kernels from the conv cost and dead capsules from
/// routing; `None` is the unpruned network.
pub fn throughput_estimate(
    spec: &CapsNetSpec,
    dead: Option<&DeadStructure>,
    costs: &CostTable,
    pe: &PEArraySpec,
    fact: usize,
    clock_hz: f64,
    schedule: Schedule,
) -> Result<Throughput> {
    if clock_hz.is_nan() || clock_hz <= 0.0 {
        return Err(Error::InvalidArgument("clock_hz must be positive".into()));
    }
    costs.validate()?;
    pe.validate()?;
    let routed = dead.map_or(*spec, |d| d.reduced_spec(spec));
    let shape = RoutingShape::from_spec(&routed, fact);
    let conv_cycles = pe.array_cycles(conv_macs(spec, dead), costs);
    let routing_cycles = routing_cycles(&shape, costs, pe, schedule).total();
    Ok(Throughput {
        conv_cycles,
        routing_cycles,
        fps: clock_hz / (conv_cycles + routing_cycles) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pruned_shape(n: u64) -> RoutingShape {
        RoutingShape {
            in_caps: n,
            ..RoutingShape::from_spec(&CapsNetSpec::mnist(), 10)
        }
    }

    #[test]
    fn ceil_log2_values() {
        assert_eq!(
            [1, 2, 3, 4, 5, 9, 10, 16, 17].map(ceil_log2),
            [0, 1, 2, 2, 3, 4, 4, 4, 5]
        );
    }

    #[test]
    fn softmax_row_golden() {
        let costs = CostTable::default();
        let pe = PEArraySpec::default();
        assert_eq!(
            softmax_row_cycles(10, &costs, &pe, Schedule::Baseline),
            9 + 10 + 270 + 9 + 490
        );
        assert_eq!(
            softmax_row_cycles(10, &costs, &pe, Schedule::Optimized),
            4 + 1 + 14 + 4 + 36
        );
    }

    #[test]
    fn mnist_report_golden() {
        let r = routing_cycle_report(
            &CapsNetSpec::mnist(),
            &CostTable::default(),
            &PEArraySpec::default(),
            10,
        )
        .unwrap();
        let fc = r.row(RoutingStep::FullyConnected);
        assert_eq!(fc.baseline, 1_474_560);
        assert_eq!(fc.optimized, 16_384 + 4);
        let ag = r.row(RoutingStep::Agreement);
        assert_eq!(ag.baseline, 2 * 1152 * 160);
        assert_eq!(ag.optimized, 2 * (160 * 128 - 1 + 1));
        assert_eq!(r.total_baseline(), r.rows.iter().map(|x| x.baseline).sum::<u64>());
        for row in &r.rows {
            assert!(row.optimized < row.baseline, "{:?}", row);
        }
        assert!((75.0..=95.0).contains(&r.softmax_reduction_pct()));
        assert!(r.to_table().contains("exp: 27 -> 14"));
        assert!(r
            .to_kv_lines()
            .contains(&"step=softmax;baseline=2723328;optimized=203904".to_string()));
    }

    #[test]
    fn routing_halves_with_capsules() {
        let costs = CostTable::default();
        let pe = PEArraySpec::default();
        let full = routing_cycles(&pruned_shape(504), &costs, &pe, Schedule::Baseline);
        let half = routing_cycles(&pruned_shape(252), &costs, &pe, Schedule::Baseline);
        for step in RoutingStep::ALL {
            if step != RoutingStep::Squash {
                assert_eq!(full.get(step), 2 * half.get(step), "{step}");
            }
        }
    }

    #[test]
    fn cost_validation() {
        let mut c = CostTable::default();
        c.set("exp_optimized", 30).unwrap();
        assert!(c.validate().is_err());
        assert!(c.set("bogus", 1).is_err());
        let pe = PEArraySpec {
            pe_count: 0,
            ..PEArraySpec::default()
        };
        assert!(pe.validate().is_err());
    }
}
