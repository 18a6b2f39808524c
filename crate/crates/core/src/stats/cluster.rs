use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StatMap;
use crate::io::IoError;
use crate::volume::{grid_to_world, Grid3, Parcellation, WorldCoord};

/// Neighbourhood for connected components: faces, faces+edges, or
/// faces+edges+corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(format!("connectivity must be 6, 18 or 26, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Offsets with at most this many nonzero components.
    fn max_nonzero(self) -> usize {
        match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        }
    }

    /// Half of the neighbourhood: offsets that precede the centre in storage
    /// order, enough for a single union-find sweep.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    let before = (dz, dy, dx) < (0, 0, 0);
                    if nz >= 1 && nz <= self.max_nonzero() && before {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller index becomes the root so roots are deterministic.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub n_voxels: usize,
    pub size_mm3: f64,
    pub peak: [usize; 3],
    pub peak_mni: WorldCoord,
    /// Signed statistic at the voxel of largest magnitude.
    pub peak_intensity: f64,
    pub region_labels: Vec<u32>,
    pub region_names: Vec<String>,
    pub voxels: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub connectivity: Connectivity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fdr_q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_threshold: Option<f64>,
    pub clusters: Vec<Cluster>,
}

impl ClusterReport {
    pub fn total_voxels(&self) -> usize {
        self.clusters.iter().map(|c| c.n_voxels).sum()
    }

    pub fn save_json(&self, path: &Path) -> Result<(), IoError> {
        let text = serde_json::to_string_pretty(self).expect("report serialises");
        std::fs::write(path, text).map_err(|e| IoError::io(path, e))
    }

    /// One row per cluster: id, voxel count, size, peak MNI, regions, peak t.
    pub fn save_csv(&self, path: &Path) -> Result<(), IoError> {
        let io = |e| IoError::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "cluster,n_voxels,size_mm3,peak_x_mm,peak_y_mm,peak_z_mm,regions,peak_t").map_err(io)?;
        for c in &self.clusters {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                c.id,
                c.n_voxels,
                c.size_mm3,
                c.peak_mni.x_mm,
                c.peak_mni.y_mm,
                c.peak_mni.z_mm,
                c.region_names.join(";"),
                c.peak_intensity
            )
            .map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Connected components of `mask` (true = significant) over `grid`.
/// Clusters are ordered by size (largest first), then by first voxel.
pub fn extract_clusters(mask: &[bool], t_map: &StatMap, parc: Option<&Parcellation>, connectivity: Connectivity) -> ClusterReport {
    let grid: &Grid3 = &t_map.grid;
    let n = grid.n_voxels();
    assert_eq!(mask.len(), n, "mask does not match map grid");
    let [nx, ny, nz] = grid.dims;
    let offsets = connectivity.backward_offsets();
    let mut ds = DisjointSet::new(n);
    for v in 0..n {
        if !mask[v] {
            continue;
        }
        let [x, y, z] = grid.coord(v);
        for d in &offsets {
            let (xx, yy, zz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
            if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                continue;
            }
            let u = grid.index([xx as usize, yy as usize, zz as usize]);
            if mask[u] {
                ds.union(v, u);
            }
        }
    }
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for v in (0..n).filter(|&v| mask[v]) {
        let r = ds.find(v);
        members.entry(r).or_default().push(v);
    }
    let mut groups: Vec<Vec<usize>> = members.into_values().collect();
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    let vol_mm3 = grid.voxel_volume_mm3();
    let clusters = groups
        .into_iter()
        .enumerate()
        .map(|(i, vox)| {
            let mut peak = vox[0];
            for &v in &vox {
                if t_map.values[v].abs() > t_map.values[peak].abs() {
                    peak = v;
                }
            }
            let labels: BTreeSet<u32> = match parc {
                Some(p) => vox.iter().map(|&v| p.label_at(v)).filter(|&l| l != 0).collect(),
                None => BTreeSet::new(),
            };
            let names = labels
                .iter()
                .map(|&l| {
                    parc.and_then(|p| p.name_of(l))
                        .map_or_else(|| format!("region_{l}"), str::to_string)
                })
                .collect();
            Cluster {
                id: i + 1,
                n_voxels: vox.len(),
                size_mm3: vox.len() as f64 * vol_mm3,
                peak: grid.coord(peak),
                peak_mni: grid_to_world(grid.coord(peak), &grid.affine),
                peak_intensity: t_map.values[peak],
                region_labels: labels.into_iter().collect(),
                region_names: names,
                voxels: vox.iter().map(|&v| grid.coord(v)).collect(),
            }
        })
        .collect();
    ClusterReport {
        connectivity,
        fdr_q: None,
        p_threshold: None,
        clusters,
    }
}
