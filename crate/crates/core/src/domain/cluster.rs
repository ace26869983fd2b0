//! Cluster topology: devices, their GPUs, and addressing helpers.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DeviceClass, DeviceId, GpuId};

/// One GPU and its scheduling capacity.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GpuSpec {
    pub gpu_id: GpuId,
    /// Total GPU memory available to model weights and activations, MiB.
    pub mem_capacity_mib: f64,
    /// Maximum schedulable compute fraction, usually 1.0. Deployments whose
    /// concurrent utilization exceeds this are considered overloaded.
    pub max_util: f64,
    /// Number of independent inference streams (temporal lanes) the
    /// co-location scheduler may lay portions out on.
    pub stream_count: u32,
}

/// A machine holding one or more GPUs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DeviceSpec {
    pub device_id: DeviceId,
    pub device_class: DeviceClass,
    pub gpus: Vec<GpuSpec>,
    /// Bandwidth for data movement that stays on this device (loopback /
    /// PCIe), bytes per second. Large but finite, so intra-device hops cost
    /// a small, honest amount of time.
    pub intra_bw_bytes_per_sec: f64,
}

/// The whole cluster. Exactly one device is the server; every pipeline
/// delivers its final results there.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClusterSpec {
    pub devices: Vec<DeviceSpec>,
    pub server_device: DeviceId,
}

/// Fully-qualified GPU address, usable as a map key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GpuKey {
    pub device_id: DeviceId,
    pub gpu_id: GpuId,
}

impl GpuKey {
    pub fn new(device_id: impl Into<DeviceId>, gpu_id: impl Into<GpuId>) -> Self {
        Self {
            device_id: device_id.into(),
            gpu_id: gpu_id.into(),
        }
    }
}

impl fmt::Display for GpuKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.device_id, self.gpu_id)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("cluster has no devices")]
    Empty,
    #[error("duplicate device id {0}")]
    DuplicateDevice(String),
    #[error("duplicate gpu id {gpu_id} on device {device_id}")]
    DuplicateGpu { device_id: String, gpu_id: String },
    #[error("server device {0} not found in device list")]
    UnknownServer(String),
    #[error("device {device_id}: {message}")]
    Invalid { device_id: String, message: String },
}

impl ClusterSpec {
    pub fn device(&self, device_id: &str) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| d.device_id == device_id)
    }

    pub fn server(&self) -> &DeviceSpec {
        self.device(&self.server_device)
            .expect("validated cluster always contains its server device")
    }

    pub fn gpu(&self, key: &GpuKey) -> Option<&GpuSpec> {
        self.device(&key.device_id)?
            .gpus
            .iter()
            .find(|g| g.gpu_id == key.gpu_id)
    }

    /// All GPU addresses in deterministic (device, gpu) declaration order.
    pub fn gpu_keys(&self) -> Vec<GpuKey> {
        let mut keys = Vec::new();
        for d in &self.devices {
            for g in &d.gpus {
                keys.push(GpuKey::new(d.device_id.clone(), g.gpu_id.clone()));
            }
        }
        keys
    }

    /// Edge devices: everything except the server, in declaration order.
    pub fn edge_devices(&self) -> impl Iterator<Item = &DeviceSpec> {
        self.devices.iter().filter(|d| d.device_id != self.server_device)
    }

    /// Structural sanity: unique ids, a known server, at least one GPU per
    /// device, positive capacities.
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.devices.is_empty() {
            return Err(ClusterError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.devices {
            if !seen.insert(&d.device_id) {
                return Err(ClusterError::DuplicateDevice(d.device_id.clone()));
            }
            if d.gpus.is_empty() {
                return Err(ClusterError::Invalid {
                    device_id: d.device_id.clone(),
                    message: "device has no GPUs".into(),
                });
            }
            if d.intra_bw_bytes_per_sec <= 0.0 {
                return Err(ClusterError::Invalid {
                    device_id: d.device_id.clone(),
                    message: "intra_bw_bytes_per_sec must be positive".into(),
                });
            }
            let mut gpu_seen = std::collections::BTreeSet::new();
            for g in &d.gpus {
                if !gpu_seen.insert(&g.gpu_id) {
                    return Err(ClusterError::DuplicateGpu {
                        device_id: d.device_id.clone(),
                        gpu_id: g.gpu_id.clone(),
                    });
                }
                if g.mem_capacity_mib <= 0.0 || g.max_util <= 0.0 || g.stream_count == 0 {
                    return Err(ClusterError::Invalid {
                        device_id: d.device_id.clone(),
                        message: format!(
                            "gpu {} needs positive memory, max_util, and stream_count",
                            g.gpu_id
                        ),
                    });
                }
            }
        }
        if self.device(&self.server_device).is_none() {
            return Err(ClusterError::UnknownServer(self.server_device.clone()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gpu(id: &str) -> GpuSpec {
        GpuSpec {
            gpu_id: id.into(),
            mem_capacity_mib: 8192.0,
            max_util: 1.0,
            stream_count: 2,
        }
    }

    fn cluster() -> ClusterSpec {
        ClusterSpec {
            devices: vec![
                DeviceSpec {
                    device_id: "server".into(),
                    device_class: "server_gpu".into(),
                    gpus: vec![gpu("g0"), gpu("g1")],
                    intra_bw_bytes_per_sec: 1e10,
                },
                DeviceSpec {
                    device_id: "edge0".into(),
                    device_class: "agx".into(),
                    gpus: vec![gpu("g0")],
                    intra_bw_bytes_per_sec: 5e9,
                },
            ],
            server_device: "server".into(),
        }
    }

    #[test]
    fn lookups_and_ordering() {
        let c = cluster();
        assert!(c.validate().is_ok());
        assert_eq!(c.server().device_class, "server_gpu");
        assert!(c.gpu(&GpuKey::new("server", "g1")).is_some());
        assert!(c.gpu(&GpuKey::new("edge0", "g1")).is_none());
        let keys = c.gpu_keys();
        assert_eq!(keys.len(), 3);
        assert_eq!(keys[0].to_string(), "server/g0");
        assert_eq!(c.edge_devices().count(), 1);
    }

    #[test]
    fn rejects_unknown_server_and_duplicates() {
        let mut c = cluster();
        c.server_device = "nope".into();
        assert_eq!(c.validate(), Err(ClusterError::UnknownServer("nope".into())));

        let mut c = cluster();
        c.devices[1].device_id = "server".into();
        assert!(matches!(c.validate(), Err(ClusterError::DuplicateDevice(_))));

        let mut c = cluster();
        c.devices[0].gpus[1].gpu_id = "g0".into();
        assert!(matches!(c.validate(), Err(ClusterError::DuplicateGpu { .. })));
    }
}
