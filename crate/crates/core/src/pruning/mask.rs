use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Unit a layer's mask is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    /// One bit per `(out_ch, in_ch)` kernel.
    Kernel,
    /// One bit per block of consecutive output channels (a capsule type);
    /// a block covers all of its channels' kernels.
    CapsuleGroup,
}

impl Granularity {
    pub fn code(self) -> u8 {
        match self {
            Granularity::Kernel => 0,
            Granularity::CapsuleGroup => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Granularity::Kernel),
            1 => Some(Granularity::CapsuleGroup),
            _ => None,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Kernel => "kernel",
            Granularity::CapsuleGroup => "capsule_group",
        })
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kernel" => Ok(Granularity::Kernel),
            "capsule_group" => Ok(Granularity::CapsuleGroup),
            other => Err(format!("unknown granularity `{other}`")),
        }
    }
}

/// Survival bits for one layer, in units of its [`Granularity`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    name: String,
    granularity: Granularity,
    units: Vec<bool>,
}

impl LayerMask {
    pub fn all_alive(name: impl Into<String>, granularity: Granularity, units: usize) -> Self {
        Self::from_units(name, granularity, vec![true; units])
    }

    pub fn from_units(name: impl Into<String>, granularity: Granularity, units: Vec<bool>) -> Self {
        LayerMask {
            name: name.into(),
            granularity,
            units,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn units(&self) -> &[bool] {
        &self.units
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn is_alive(&self, unit: usize) -> bool {
        self.units[unit]
    }

    pub fn kill(&mut self, unit: usize) {
        self.units[unit] = false;
    }

    pub fn survivors(&self) -> usize {
        self.units.iter().filter(|&&a| a).count()
    }

    /// Ascending ids of the surviving units: the index table kept on chip.
    pub fn surviving_indices(&self) -> Vec<u32> {
        self.units
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Output channels covered by one unit, for a layer with `out_channels`.
    pub fn channels_per_unit(&self, out_channels: usize, in_channels: usize) -> Result<usize> {
        match self.granularity {
            Granularity::Kernel => {
                if self.units.len() != out_channels * in_channels {
                    return Err(Error::shape(format!(
                        "mask `{}` has {} kernel bits, layer has {}x{} kernels",
                        self.name,
                        self.units.len(),
                        out_channels,
                        in_channels
                    )));
                }
                Ok(1)
            }
            Granularity::CapsuleGroup => {
                if self.units.is_empty() || !out_channels.is_multiple_of(self.units.len()) {
                    return Err(Error::shape(format!(
                        "mask `{}` has {} groups, which do not tile {} output channels",
                        self.name,
                        self.units.len(),
                        out_channels
                    )));
                }
                Ok(out_channels / self.units.len())
            }
        }
    }

    /// Kernel-level survival table, row-major over `(out_ch, in_ch)`.
    pub fn kernel_table(&self, out_channels: usize, in_channels: usize) -> Result<Vec<bool>> {
        let per_unit = self.channels_per_unit(out_channels, in_channels)?;
        Ok(match self.granularity {
            Granularity::Kernel => self.units.clone(),
            Granularity::CapsuleGroup => (0..out_channels * in_channels)
                .map(|k| self.units[k / in_channels / per_unit])
                .collect(),
        })
    }

    /// Re-expresses the mask at kernel granularity.
    pub fn to_kernel_mask(&self, out_channels: usize, in_channels: usize) -> Result<LayerMask> {
        Ok(LayerMask::from_units(
            self.name.clone(),
            Granularity::Kernel,
            self.kernel_table(out_channels, in_channels)?,
        ))
    }
}

/// Surviving input channels per output channel; drives kernel skipping in
/// the convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelIndexTable {
    per_output: Vec<Vec<u32>>,
}

impl KernelIndexTable {
    pub fn new(mask: Option<&LayerMask>, out_channels: usize, in_channels: usize) -> Result<Self> {
        let per_output = match mask {
            None => (0..out_channels).map(|_| (0..in_channels as u32).collect()).collect(),
            Some(m) => {
                let table = m.kernel_table(out_channels, in_channels)?;
                (0..out_channels)
                    .map(|o| {
                        (0..in_channels)
                            .filter(|&c| table[o * in_channels + c])
                            .map(|c| c as u32)
                            .collect()
                    })
                    .collect()
            }
        };
        Ok(KernelIndexTable { per_output })
    }

    pub fn inputs(&self, out_channel: usize) -> &[u32] {
        &self.per_output[out_channel]
    }

    pub fn surviving(&self) -> usize {
        self.per_output.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_expansion() {
        let m = LayerMask::from_units("p", Granularity::CapsuleGroup, vec![true, false]);
        let t = m.kernel_table(4, 3).unwrap();
        assert_eq!(t, [[true; 6], [false; 6]].concat());
        assert!(m.kernel_table(5, 3).is_err());
        assert_eq!(m.surviving_indices(), vec![0]);
    }

    #[test]
    fn index_table_skips_masked() {
        let m = LayerMask::from_units("k", Granularity::Kernel, vec![true, false, false, true]);
        let t = KernelIndexTable::new(Some(&m), 2, 2).unwrap();
        assert_eq!(t.inputs(0), &[0]);
        assert_eq!(t.inputs(1), &[1]);
        assert_eq!(t.surviving(), 2);
    }

    #[test]
    fn granularity_codes() {
        for g in [Granularity::Kernel, Granularity::CapsuleGroup] {
            assert_eq!(Granularity::from_code(g.code()), Some(g));
            assert_eq!(g.to_string().parse::<Granularity>().unwrap(), g);
        }
        assert_eq!(Granularity::from_code(7), None);
    }
}
