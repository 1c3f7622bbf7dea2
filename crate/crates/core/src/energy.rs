//! Theoretical energy of one forward pass.
//!
//! Layers fed by binary spikes only do work when an input fires, so they are
//! charged one accumulate (AC) per synapse actually driven. Layers fed by
//! real values are charged one multiply-accumulate (MAC) per synapse.
//! Energy is `AC · 0.9 pJ + MAC · 4.6 pJ` (45 nm figures).

use serde::{Deserialize, Serialize};

pub const AC_PJ: f64 = 0.9;
pub const MAC_PJ: f64 = 4.6;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: String,
    pub ac: u64,
    pub mac: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub ac: u64,
    pub mac: u64,
    pub layers: Vec<LayerCount>,
}

impl OpCounts {
    fn layer(&mut self, name: &str) -> &mut LayerCount {
        let pos = match self.layers.iter().position(|l| l.layer == name) {
            Some(p) => p,
            None => {
                self.layers.push(LayerCount {
                    layer: name.to_string(),
                    ..Default::default()
                });
                self.layers.len() - 1
            }
        };
        &mut self.layers[pos]
    }

    pub fn add_ac(&mut self, layer: &str, n: u64) {
        self.ac += n;
        self.layer(layer).ac += n;
    }

    pub fn add_mac(&mut self, layer: &str, n: u64) {
        self.mac += n;
        self.layer(layer).mac += n;
    }

    pub fn layer_counts(&self, layer: &str) -> Option<&LayerCount> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn energy_pj(&self) -> f64 {
        self.ac as f64 * AC_PJ + self.mac as f64 * MAC_PJ
    }

    pub fn energy_mj(&self) -> f64 {
        self.energy_pj() * 1e-9
    }
}

/// Number of output positions whose window covers each input coordinate.
fn coverage(input: usize, output: usize, k: usize, stride: usize, pad: usize) -> Vec<u64> {
    let mut cov = vec![0u64; input];
    for o in 0..output {
        for kk in 0..k {
            let i = (o * stride + kk) as isize - pad as isize;
            if i >= 0 && (i as usize) < input {
                cov[i as usize] += 1;
            }
        }
    }
    cov
}

/// Synaptic accumulates driven by a spike tensor `[N, C_in, H, W]` through a
/// `k×k` convolution: each nonzero input fans out to every output position
/// whose window covers it, in each of `c_out` filters (`c_out = 1` per
/// channel for a depthwise filter).
pub fn conv_ac_count(spikes: &[f64], shape: [usize; 4], c_out_per_input: usize, k: usize, stride: usize, pad: usize) -> u64 {
    let [_, _, h, w] = shape;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let ch = coverage(h, oh, k, stride, pad);
    let cw = coverage(w, ow, k, stride, pad);
    let mut total = 0u64;
    for (i, &s) in spikes.iter().enumerate() {
        if s != 0.0 {
            let x = i % w;
            let y = (i / w) % h;
            total += ch[y] * cw[x];
        }
    }
    total * c_out_per_input as u64
}
