use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimaryCapsSpec {
    pub capsule_types: usize,
    pub caps_dim: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DigitCapsSpec {
    pub count: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingConfig {
    pub iters: usize,
    /// Apply the agreement update after the final iteration too. Off by
    /// default: the last update would never be read.
    pub update_last_iteration: bool,
    /// Squash PrimaryCaps outputs before routing.
    pub squash_primary: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            iters: 3,
            update_last_iteration: false,
            squash_primary: true,
        }
    }
}

/// CapsNet architecture: conv1 → ReLU → PrimaryCaps conv → capsules →
/// DigitCaps via dynamic routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsNetSpec {
    pub input_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub conv1: ConvSpec,
    pub primary: PrimaryCapsSpec,
    pub digit: DigitCapsSpec,
    pub routing: RoutingConfig,
}

impl CapsNetSpec {
    /// 28×28 MNIST network: 256 9×9 conv1 filters, 32 8-D capsule types on a
    /// 6×6 grid (1152 capsules), 10 16-D digit capsules.
    pub fn mnist() -> Self {
        CapsNetSpec {
            input_channels: 1,
            input_h: 28,
            input_w: 28,
            conv1: ConvSpec {
                out_channels: 256,
                kernel: 9,
                stride: 1,
            },
            primary: PrimaryCapsSpec {
                capsule_types: 32,
                caps_dim: 8,
                kernel: 9,
                stride: 2,
            },
            digit: DigitCapsSpec { count: 10, dim: 16 },
            routing: RoutingConfig::default(),
        }
    }

    pub fn conv1_hw(&self) -> (usize, usize) {
        (
            (self.input_h - self.conv1.kernel) / self.conv1.stride + 1,
            (self.input_w - self.conv1.kernel) / self.conv1.stride + 1,
        )
    }

    pub fn grid_hw(&self) -> (usize, usize) {
        let (h, w) = self.conv1_hw();
        (
            (h - self.primary.kernel) / self.primary.stride + 1,
            (w - self.primary.kernel) / self.primary.stride + 1,
        )
    }

    pub fn grid_size(&self) -> usize {
        let (h, w) = self.grid_hw();
        h * w
    }

    pub fn primary_channels(&self) -> usize {
        self.primary.capsule_types * self.primary.caps_dim
    }

    /// Number of input capsules to routing (`IN_CH`).
    pub fn in_caps(&self) -> usize {
        self.primary.capsule_types * self.grid_size()
    }

    /// Routing weights per input capsule: `OUT_CH · OUT_DIM · caps_dim`.
    pub fn params_per_capsule(&self) -> usize {
        self.digit.count * self.digit.dim * self.primary.caps_dim
    }

    pub fn routing_weight_count(&self) -> usize {
        self.in_caps() * self.params_per_capsule()
    }

    pub fn conv1_weight_count(&self) -> usize {
        self.conv1.out_channels * self.input_channels * self.conv1.kernel * self.conv1.kernel
    }

    pub fn primary_weight_count(&self) -> usize {
        self.primary_channels() * self.conv1.out_channels * self.primary.kernel * self.primary.kernel
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input channels", self.input_channels),
            ("conv1 channels", self.conv1.out_channels),
            ("conv1 kernel", self.conv1.kernel),
            ("conv1 stride", self.conv1.stride),
            ("capsule types", self.primary.capsule_types),
            ("capsule dim", self.primary.caps_dim),
            ("primary kernel", self.primary.kernel),
            ("primary stride", self.primary.stride),
            ("digit capsules", self.digit.count),
            ("digit dim", self.digit.dim),
            ("routing iterations", self.routing.iters),
        ];
        for (what, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{what} must be at least 1")));
            }
        }
        if self.input_h < self.conv1.kernel || self.input_w < self.conv1.kernel {
            return Err(Error::shape("input smaller than conv1 kernel"));
        }
        let (h, w) = self.conv1_hw();
        if h < self.primary.kernel || w < self.primary.kernel {
            return Err(Error::shape("conv1 output smaller than PrimaryCaps kernel"));
        }
        Ok(())
    }
}
