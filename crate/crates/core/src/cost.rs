//! Area, energy, power and throughput estimates as linear functions of the
//! layout's structural counts and the simulated operation counts.
//!
//! PEs run in parallel. Within a PE the weight sub-arrays are processed one
//! after another (or concurrently when `parallel_subarrays` is set) and the
//! input sub-array is rewritten for every kernel position.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mapper::{layout_stats, PimLayout, RemovalMode, SimulationTrace};

pub const REPORT_FORMAT: &str = "pimforge-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// µm² per memory cell.
    pub area_per_cell: f64,
    /// µm² of peripheral circuitry per sub-array.
    pub area_per_subarray_overhead: f64,
    /// µm² of decoder and computing set per PE.
    pub area_per_pe_overhead: f64,
    /// pJ per row-pair AND.
    pub energy_per_and_row_op: f64,
    pub energy_per_bitcount: f64,
    pub energy_per_shift_accum: f64,
    /// pJ per input sub-array rewrite.
    pub energy_per_input_write: f64,
    pub cycle_per_and_row_op: f64,
    pub cycle_per_input_write: f64,
    /// µW per PE present in the layout.
    pub static_power_per_pe: f64,
    /// MHz.
    pub clock: f64,
    #[serde(default)]
    pub parallel_subarrays: bool,
}

impl Default for CostParams {
    /// Order-of-magnitude figures for a 32 nm-class SOT-MRAM macro. They are
    /// placeholders for comparisons, not calibrated numbers.
    fn default() -> Self {
        CostParams {
            note: None,
            area_per_cell: 0.06,
            area_per_subarray_overhead: 50.0,
            area_per_pe_overhead: 2000.0,
            energy_per_and_row_op: 0.5,
            energy_per_bitcount: 0.2,
            energy_per_shift_accum: 0.1,
            energy_per_input_write: 5.0,
            cycle_per_and_row_op: 1.0,
            cycle_per_input_write: 10.0,
            static_power_per_pe: 1.0,
            clock: 500.0,
            parallel_subarrays: false,
        }
    }
}

impl CostParams {
    fn fields(&self) -> [(&'static str, f64); 11] {
        [
            ("area_per_cell", self.area_per_cell),
            ("area_per_subarray_overhead", self.area_per_subarray_overhead),
            ("area_per_pe_overhead", self.area_per_pe_overhead),
            ("energy_per_and_row_op", self.energy_per_and_row_op),
            ("energy_per_bitcount", self.energy_per_bitcount),
            ("energy_per_shift_accum", self.energy_per_shift_accum),
            ("energy_per_input_write", self.energy_per_input_write),
            ("cycle_per_and_row_op", self.cycle_per_and_row_op),
            ("cycle_per_input_write", self.cycle_per_input_write),
            ("static_power_per_pe", self.static_power_per_pe),
            ("clock", self.clock),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.fields() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("cost parameter {name} = {v} must be finite and non-negative")));
            }
        }
        if self.clock <= 0.0 {
            return Err(Error::Config("clock must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: CostParams = io::read_json(path, "cost parameters")?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub pes: usize,
    pub weight_subarrays: usize,
    pub area_um2: f64,
    /// Dynamic energy per inference.
    pub energy_pj: f64,
    /// Critical-path cycles per inference (slowest PE).
    pub cycles: f64,
    /// Largest per-PE sequential row-pair AND count.
    pub max_pe_and_ops: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Baseline area over compressed area.
    pub area_reduction: f64,
    pub power_reduction: f64,
    /// Compressed throughput over baseline throughput.
    pub throughput_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReport {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub mode: RemovalMode,
    pub area_um2: f64,
    /// Dynamic plus static energy per inference.
    pub energy_pj: f64,
    pub static_energy_pj: f64,
    pub cycles: f64,
    pub latency_s: f64,
    pub power_uw: f64,
    /// Inferences per second.
    pub throughput: f64,
    pub layers: Vec<LayerCost>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

/// Cost of one inference on `layout`, with operation counts averaged over
/// the samples in `trace`.
pub fn estimate(layout: &PimLayout, trace: &SimulationTrace, params: &CostParams) -> Result<CostReport> {
    params.validate()?;
    if !trace.matches(layout) || trace.mode != layout.mode {
        return Err(Error::Config("trace was not recorded on this layout".into()));
    }
    let has_work = trace.layers.iter().any(|l| !l.pes.is_empty());
    if trace.samples == 0 && has_work {
        return Err(Error::Config("trace covers no samples".into()));
    }
    let per = 1.0 / trace.samples.max(1) as f64;
    let stats = layout_stats(layout);
    let mut layers = Vec::with_capacity(layout.layers.len());
    for ((l, lt), st) in layout.layers.iter().zip(&trace.layers).zip(&stats.layers) {
        let subarray_cells: usize = st.cells;
        let subarrays = st.weight_subarrays + st.pes;
        let area = subarray_cells as f64 * params.area_per_cell
            + subarrays as f64 * params.area_per_subarray_overhead
            + st.pes as f64 * params.area_per_pe_overhead;
        let mut energy = 0.0;
        let mut cycles: f64 = 0.0;
        let mut max_ops: f64 = 0.0;
        for (pe, pt) in l.pes.iter().zip(&lt.pes) {
            let t = pt.counts;
            let and_ops = t.and_row_ops as f64 * per;
            energy += and_ops * params.energy_per_and_row_op
                + t.bitcounts as f64 * per * params.energy_per_bitcount
                + t.shift_accums as f64 * per * params.energy_per_shift_accum
                + t.input_writes as f64 * per * params.energy_per_input_write;
            let active = pe.skip_lut.iter().filter(|&&s| !s).count().max(1) as f64;
            let sequential = if params.parallel_subarrays { and_ops / active } else { and_ops };
            let c = sequential * params.cycle_per_and_row_op + t.input_writes as f64 * per * params.cycle_per_input_write;
            cycles = cycles.max(c);
            max_ops = max_ops.max(sequential);
        }
        layers.push(LayerCost {
            layer: l.layer,
            pes: st.pes,
            weight_subarrays: st.weight_subarrays,
            area_um2: area,
            energy_pj: energy,
            cycles,
            max_pe_and_ops: max_ops,
        });
    }
    let area: f64 = layers.iter().map(|l| l.area_um2).sum();
    let dynamic: f64 = layers.iter().map(|l| l.energy_pj).sum();
    let cycles: f64 = layers.iter().map(|l| l.cycles).sum();
    let latency = cycles / (params.clock * 1e6);
    let static_energy = params.static_power_per_pe * stats.total.pes as f64 * latency * 1e6;
    let energy = dynamic + static_energy;
    let (power, throughput) = if latency > 0.0 { (energy / latency * 1e-6, 1.0 / latency) } else { (0.0, 0.0) };
    Ok(CostReport {
        format: REPORT_FORMAT.to_string(),
        seed: layout.seed,
        mode: layout.mode,
        area_um2: area,
        energy_pj: energy,
        static_energy_pj: static_energy,
        cycles,
        latency_s: latency,
        power_uw: power,
        throughput,
        layers,
        comparison: None,
    })
}

/// `(baseline / compressed)` for area and power, `(compressed / baseline)`
/// for throughput.
pub fn compare(compressed: &CostReport, baseline: &CostReport) -> Result<Comparison> {
    for (name, b, c) in [
        ("area", baseline.area_um2, compressed.area_um2),
        ("power", baseline.power_uw, compressed.power_uw),
        ("throughput", baseline.throughput, compressed.throughput),
    ] {
        if b == 0.0 {
            return Err(Error::Config(format!("baseline {name} is zero")));
        }
        if c == 0.0 {
            return Err(Error::Config(format!("compressed {name} is zero; nothing to compare")));
        }
    }
    Ok(Comparison {
        area_reduction: baseline.area_um2 / compressed.area_um2,
        power_reduction: baseline.power_uw / compressed.power_uw,
        throughput_gain: compressed.throughput / baseline.throughput,
    })
}

impl CostReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: CostReport = io::read_json(path, "cost report")?;
        if r.format != REPORT_FORMAT {
            return Err(Error::Config(format!("unsupported report format {:?}", r.format)));
        }
        Ok(r)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,pes,weight_subarrays,area_um2,energy_pj,cycles,max_pe_and_ops\n");
        for l in &self.layers {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                l.layer, l.pes, l.weight_subarrays, l.area_um2, l.energy_pj, l.cycles, l.max_pe_and_ops
            ));
        }
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5} {:>5} {:>9} {:>14} {:>14} {:>12}", "layer", "PEs", "subarrays", "area (um2)", "energy (pJ)", "cycles")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:>5} {:>5} {:>9} {:>14.1} {:>14.1} {:>12.0}",
                l.layer, l.pes, l.weight_subarrays, l.area_um2, l.energy_pj, l.cycles
            )?;
        }
        writeln!(f, "area        {:.1} um2", self.area_um2)?;
        writeln!(f, "energy      {:.1} pJ/inference ({:.1} static)", self.energy_pj, self.static_energy_pj)?;
        writeln!(f, "power       {:.3} uW", self.power_uw)?;
        write!(f, "throughput  {:.1} inferences/s", self.throughput)?;
        if let Some(c) = &self.comparison {
            write!(
                f,
                "\nvs baseline area x{:.3}  power x{:.3}  throughput x{:.3}",
                c.area_reduction, c.power_reduction, c.throughput_gain
            )?;
        }
        Ok(())
    }
}
