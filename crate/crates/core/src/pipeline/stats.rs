use serde::Serialize;

use crate::error::Result;
use crate::synth::{edge_density_stats, EdgeDensity, LabeledScene};

/// Width of each edge band as a fraction of the perpendicular box extent.
pub const DEFAULT_EDGE_BAND: f64 = 0.1;

/// Mean of the per-object density shares over every counted object.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityReport {
    pub objects: usize,
    pub mean: Option<EdgeDensity>,
}

pub fn density_report(scenes: &[LabeledScene], edge_band: f64) -> Result<DensityReport> {
    let mut sum = EdgeDensity {
        edges: [0.0; 4],
        others: 0.0,
    };
    let mut n = 0usize;
    for s in scenes {
        for d in edge_density_stats(s, edge_band)? {
            for k in 0..4 {
                sum.edges[k] += d.edges[k];
            }
            sum.others += d.others;
            n += 1;
        }
    }
    let mean = (n > 0).then(|| EdgeDensity {
        edges: sum.edges.map(|e| e / n as f64),
        others: sum.others / n as f64,
    });
    Ok(DensityReport { objects: n, mean })
}

impl DensityReport {
    /// Header `E1,E2,E3,E4,others,objects`, plus one row when any object
    /// was counted.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("E1,E2,E3,E4,others,objects\n");
        if let Some(m) = &self.mean {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.edges[0], m.edges[1], m.edges[2], m.edges[3], m.others, self.objects
            ));
        }
        s
    }
}
