use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isa::CHANNELS_PER_CORE;

/// Accelerator and platform parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareConfig {
    pub name: String,
    pub frequency_mhz: f64,
    /// MPE count, one core per SLR.
    pub num_cores: usize,
    pub mpus_per_core: usize,
    pub p_m: usize,
    pub p_k: usize,
    pub p_n: usize,
    pub hbm_channels: usize,
    pub hbm_channel_gbps: f64,
    /// Width of one core-side HBM port; caps per-channel throughput at
    /// `port_bytes * frequency`.
    pub port_bytes: usize,
    pub hbm_bytes: u64,
    pub hbm_latency_cycles: u64,
    pub ddr_gbps: f64,
    pub ddr_bytes: u64,
    pub ddr_latency_cycles: u64,
    pub weight_buffer_bytes: usize,
    pub global_buffer_bytes: usize,
    pub act_buffer_bytes: usize,
    pub index_buffer_bytes: usize,
    /// fp16 lanes per SFU.
    pub sfu_lanes: usize,
    /// Cycles for a SYS barrier / remote-SFU exchange setup.
    pub sync_cycles: u64,
    pub activation_width_bits: usize,
    pub uram_width_bits: usize,
    pub platform_dsps: usize,
    pub platform_urams: usize,
    pub platform_brams: usize,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self::u280()
    }
}

const GIB: u64 = 1 << 30;

impl HardwareConfig {
    /// Alveo U280: 8 GiB HBM2 over 32 channels, 32 GiB DDR4.
    pub fn u280() -> Self {
        HardwareConfig {
            name: "u280".into(),
            frequency_mhz: 225.0,
            num_cores: 3,
            mpus_per_core: 16,
            p_m: 4,
            p_k: 8,
            p_n: 4,
            hbm_channels: 32,
            hbm_channel_gbps: 14.4,
            port_bytes: 64,
            hbm_bytes: 8 * GIB,
            hbm_latency_cycles: 56,
            ddr_gbps: 38.0,
            ddr_bytes: 32 * GIB,
            ddr_latency_cycles: 28,
            weight_buffer_bytes: 512 << 10,
            global_buffer_bytes: 2 << 20,
            act_buffer_bytes: 1 << 20,
            index_buffer_bytes: 64 << 10,
            sfu_lanes: 16,
            sync_cycles: 32,
            activation_width_bits: 8,
            uram_width_bits: 72,
            platform_dsps: 9024,
            platform_urams: 960,
            platform_brams: 2016,
        }
    }

    /// Versal VHK158: 32 GiB HBM2e at 819 GB/s, same accelerator build.
    pub fn vhk158() -> Self {
        HardwareConfig {
            name: "vhk158".into(),
            hbm_channel_gbps: 819.0 / 32.0,
            hbm_bytes: 32 * GIB,
            platform_dsps: 7392,
            platform_urams: 1301,
            platform_brams: 3741,
            ..Self::u280()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "u280" => Ok(Self::u280()),
            "vhk158" => Ok(Self::vhk158()),
            other => Err(Error::Config(format!("unknown hardware preset '{other}'"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let hw: HardwareConfig = serde_json::from_str(text)?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_cores", self.num_cores),
            ("mpus_per_core", self.mpus_per_core),
            ("p_m", self.p_m),
            ("p_k", self.p_k),
            ("p_n", self.p_n),
            ("hbm_channels", self.hbm_channels),
            ("port_bytes", self.port_bytes),
            ("weight_buffer_bytes", self.weight_buffer_bytes),
            ("global_buffer_bytes", self.global_buffer_bytes),
            ("act_buffer_bytes", self.act_buffer_bytes),
            ("index_buffer_bytes", self.index_buffer_bytes),
            ("sfu_lanes", self.sfu_lanes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.frequency_mhz <= 0.0 || self.hbm_channel_gbps <= 0.0 || self.ddr_gbps <= 0.0 {
            return Err(Error::Config("frequency and bandwidths must be positive".into()));
        }
        if self.num_cores > crate::isa::program::MAX_SLRS {
            return Err(Error::Config(format!("at most {} cores are supported", crate::isa::program::MAX_SLRS)));
        }
        if self.num_cores * CHANNELS_PER_CORE > self.hbm_channels {
            return Err(Error::Config(format!(
                "{} cores need {} HBM channels, platform has {}",
                self.num_cores,
                self.num_cores * CHANNELS_PER_CORE,
                self.hbm_channels
            )));
        }
        Ok(())
    }

    pub fn hbm_channel_bytes(&self) -> u64 {
        self.hbm_bytes / self.hbm_channels as u64
    }

    /// Sustained bytes per cycle of one HBM channel as seen by a core.
    pub fn channel_bytes_per_cycle(&self) -> f64 {
        (self.hbm_channel_gbps * 1e3 / self.frequency_mhz).min(self.port_bytes as f64)
    }

    pub fn ddr_bytes_per_cycle(&self) -> f64 {
        (self.ddr_gbps * 1e3 / self.frequency_mhz).min(self.port_bytes as f64)
    }

    /// Platform HBM peak in bytes per second.
    pub fn hbm_peak_bytes_per_s(&self) -> f64 {
        self.hbm_channels as f64 * self.hbm_channel_gbps * 1e9
    }

    /// MAC lanes per core, counting both MACs packed into each DSP.
    pub fn macs_per_core(&self) -> usize {
        2 * self.p_m * self.p_k * self.p_n * self.mpus_per_core
    }
}
