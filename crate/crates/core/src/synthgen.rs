//! Synthetic cortical surfaces and the thickness-difference graphs built from
//! them.
//!
//! Each subject gets a sphere-like cortex of `nodes_target` compact vertex
//! patches. Patch centres sit on a Fibonacci lattice (sorted from pole to
//! pole), so consecutive patches are spatial neighbours and a contiguous run
//! of patches forms a region. Thickness is a subject mean plus a smooth
//! per-region offset plus per-vertex noise. AD subjects have the leading
//! `affected_fraction` of regions thinned by `thinning_factor`, which is the
//! planted class signal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{BrainGraph, GraphDataset};
use crate::rng::{derive_seed, sub_rng};

pub const CORTEX_RADIUS_MM: f64 = 85.0;
pub const MIN_THICKNESS_MM: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Nc,
    Ad,
}

impl Group {
    pub fn label(self) -> u8 {
        match self {
            Group::Nc => 0,
            Group::Ad => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Group(Group),
    Indeterminate,
}

/// Cohort rule: NC iff CDR = 0 and MMSE in 25..=30; AD iff CDR ≥ 0.5 and
/// MMSE ≤ 24; anything else is excluded.
pub fn assign_group(cdr: f64, mmse: u32) -> Result<Assignment> {
    if !cdr.is_finite() || cdr < 0.0 {
        return Err(Error::Domain(format!(
            "CDR must be a finite value >= 0, got {cdr}"
        )));
    }
    if mmse > 30 {
        return Err(Error::Domain(format!(
            "MMSE must lie in 0..=30, got {mmse}"
        )));
    }
    Ok(if cdr == 0.0 && (25..=30).contains(&mmse) {
        Assignment::Group(Group::Nc)
    } else if cdr >= 0.5 && mmse <= 24 {
        Assignment::Group(Group::Ad)
    } else {
        Assignment::Indeterminate
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMeta {
    pub cdr: f64,
    pub mmse: u32,
    pub group: Group,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vertex {
    pub position: [f64; 3],
    pub thickness: f64,
    pub region_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceModel {
    pub vertices: Vec<Vertex>,
    pub meta: SubjectMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub nodes_target: usize,
    pub vertices_per_node: usize,
    pub n_ad: usize,
    pub n_nc: usize,
    /// Edge kernel bandwidth, mm.
    pub sigma_t: f64,
    pub thinning_factor: f64,
    pub affected_fraction: f64,
    /// Number of contiguous regions the patches are grouped into.
    pub n_regions: usize,
    pub mean_thickness: f64,
    pub subject_sd: f64,
    pub region_sd: f64,
    pub vertex_sd: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            nodes_target: 1162,
            vertices_per_node: 250,
            n_ad: 60,
            n_nc: 61,
            sigma_t: 0.5,
            thinning_factor: 0.85,
            affected_fraction: 0.25,
            n_regions: 32,
            mean_thickness: 2.5,
            subject_sd: 0.15,
            region_sd: 0.05,
            vertex_sd: 0.1,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// Small cohort for quick runs: 128 nodes of 50 vertices, 20 + 20 subjects.
    pub fn desk() -> Self {
        GenConfig {
            nodes_target: 128,
            vertices_per_node: 50,
            n_ad: 20,
            n_nc: 20,
            ..GenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes_target", self.nodes_target),
            ("vertices_per_node", self.vertices_per_node),
            ("n_regions", self.n_regions),
            ("subjects", self.n_ad + self.n_nc),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if !(self.sigma_t > 0.0) {
            return Err(Error::config(format!(
                "sigma_t must be > 0, got {}",
                self.sigma_t
            )));
        }
        // 1.0 is allowed as the no-signal control.
        if !(self.thinning_factor > 0.0 && self.thinning_factor <= 1.0) {
            return Err(Error::config(format!(
                "thinning_factor must lie in (0, 1], got {}",
                self.thinning_factor
            )));
        }
        if !(self.affected_fraction > 0.0 && self.affected_fraction <= 1.0) {
            return Err(Error::config(format!(
                "affected_fraction must lie in (0, 1], got {}",
                self.affected_fraction
            )));
        }
        if !(self.mean_thickness > 0.0)
            || self.subject_sd < 0.0
            || self.region_sd < 0.0
            || self.vertex_sd < 0.0
        {
            return Err(Error::config(
                "thickness distribution parameters out of range",
            ));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.n_regions.min(self.nodes_target)
    }

    /// Regions `0..affected_regions()` are thinned in AD subjects.
    pub fn affected_regions(&self) -> usize {
        ((self.affected_fraction * self.regions() as f64).round() as usize).clamp(1, self.regions())
    }

    pub fn region_of_node(&self, node: usize) -> usize {
        node * self.regions() / self.nodes_target
    }

    pub fn is_affected_node(&self, node: usize) -> bool {
        self.region_of_node(node) < self.affected_regions()
    }
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("standard deviation validated")
}

/// Points `i = 0..n` of a Fibonacci lattice on the unit sphere, ordered by
/// descending z.
fn fibonacci_point(i: usize, n: usize) -> [f64; 3] {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
    let r = (1.0 - z * z).sqrt();
    let phi = golden * i as f64;
    [r * phi.cos(), r * phi.sin(), z]
}

fn sample_meta(group: Group, rng: &mut ChaCha8Rng) -> SubjectMeta {
    let (cdr, mmse) = match group {
        Group::Nc => (0.0, rng.random_range(25..=30)),
        Group::Ad => {
            const CDR: [f64; 3] = [0.5, 1.0, 2.0];
            (
                CDR[rng.random_range(0..CDR.len())],
                rng.random_range(12..=24),
            )
        }
    };
    SubjectMeta { cdr, mmse, group }
}

/// Builds one subject's surface.
///
/// Geometry and thickness are drawn from streams that do not depend on
/// `group`, so with `thinning_factor == 1` an AD and an NC surface generated
/// from the same seed have identical vertices.
pub fn generate_surface(cfg: &GenConfig, group: Group, seed: u64) -> Result<SurfaceModel> {
    cfg.validate()?;
    let n = cfg.nodes_target;
    let vpn = cfg.vertices_per_node;
    let mut geo_rng = sub_rng(seed, 1);
    let mut thick_rng = sub_rng(seed, 2);
    let mut meta_rng = sub_rng(seed, 3);

    // Patch spread: a fraction of the lattice spacing, in tangent-plane units.
    let spacing = (4.0 * std::f64::consts::PI / n as f64).sqrt();
    let jitter = normal(0.0, 0.3 * spacing);

    let regions = cfg.regions();
    let raw: Vec<f64> = (0..regions)
        .map(|_| normal(0.0, cfg.region_sd).sample(&mut thick_rng))
        .collect();
    // 1-2-1 smoothing along the pole-to-pole region order.
    let region_offset: Vec<f64> = (0..regions)
        .map(|r| {
            let prev = raw[r.saturating_sub(1)];
            let next = raw[(r + 1).min(regions - 1)];
            0.25 * prev + 0.5 * raw[r] + 0.25 * next
        })
        .collect();
    let subject_mean = normal(cfg.mean_thickness, cfg.subject_sd).sample(&mut thick_rng);
    let vertex_noise = normal(0.0, cfg.vertex_sd);
    let affected = cfg.affected_regions();

    let mut vertices = Vec::with_capacity(n * vpn);
    for node in 0..n {
        let center = fibonacci_point(node, n);
        // Orthonormal tangent basis at the centre.
        let helper = if center[2].abs() < 0.9 {
            [0.0, 0.0, 1.0]
        } else {
            [1.0, 0.0, 0.0]
        };
        let t1 = normalize(cross(center, helper));
        let t2 = cross(center, t1);
        let region_id = cfg.region_of_node(node);
        for _ in 0..vpn {
            let (a, b) = (jitter.sample(&mut geo_rng), jitter.sample(&mut geo_rng));
            let p = normalize([
                center[0] + a * t1[0] + b * t2[0],
                center[1] + a * t1[1] + b * t2[1],
                center[2] + a * t1[2] + b * t2[2],
            ]);
            let position = p.map(|c| c * CORTEX_RADIUS_MM);
            let mut thickness =
                (subject_mean + region_offset[region_id] + vertex_noise.sample(&mut thick_rng))
                    .max(MIN_THICKNESS_MM);
            if group == Group::Ad && region_id < affected {
                thickness *= cfg.thinning_factor;
            }
            vertices.push(Vertex {
                position,
                thickness,
                region_id,
            });
        }
    }
    Ok(SurfaceModel {
        vertices,
        meta: sample_meta(group, &mut meta_rng),
    })
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeSummary {
    pub position: [f64; 3],
    pub thickness: f64,
}

/// Collapses runs of `vertices_per_node` region-sorted vertices into nodes
/// (centroid position, mean thickness).
pub fn aggregate_patches(surface: &SurfaceModel, cfg: &GenConfig) -> Result<Vec<NodeSummary>> {
    let vpn = cfg.vertices_per_node;
    let count = surface.vertices.len();
    if vpn == 0 || !count.is_multiple_of(vpn) {
        return Err(Error::config(format!(
            "{count} vertices cannot be split into patches of {vpn}"
        )));
    }
    if count / vpn != cfg.nodes_target {
        return Err(Error::config(format!(
            "{count} vertices make {} patches of {vpn}, expected {}",
            count / vpn,
            cfg.nodes_target
        )));
    }
    let mut sorted: Vec<&Vertex> = surface.vertices.iter().collect();
    sorted.sort_by_key(|v| v.region_id);
    Ok(sorted
        .chunks(vpn)
        .map(|patch| {
            let k = patch.len() as f64;
            let mut position = [0.0; 3];
            let mut thickness = 0.0;
            for v in patch {
                for (p, c) in position.iter_mut().zip(v.position) {
                    *p += c;
                }
                thickness += v.thickness;
            }
            NodeSummary {
                position: position.map(|p| p / k),
                thickness: thickness / k,
            }
        })
        .collect())
}

/// `w_ij = exp(-|t_i - t_j| / sigma_t)` off the diagonal, zero on it.
pub fn edge_weights(thickness: &[f64], sigma_t: f64) -> Result<Vec<f64>> {
    if !(sigma_t > 0.0) {
        return Err(Error::config(format!("sigma_t must be > 0, got {sigma_t}")));
    }
    if let Some(t) = thickness.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Domain(format!(
            "node thickness must be positive, got {t}"
        )));
    }
    let n = thickness.len();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let e = (-(thickness[i] - thickness[j]).abs() / sigma_t).exp();
            w[i * n + j] = e;
            w[j * n + i] = e;
        }
    }
    Ok(w)
}

/// Seed of subject `index` under master seed `master`.
pub fn subject_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, index as u64)
}

/// Generates subject `index` of the cohort: AD for `index < n_ad`, NC after.
pub fn generate_subject(cfg: &GenConfig, index: usize) -> Result<(BrainGraph, SubjectMeta)> {
    let group = if index < cfg.n_ad {
        Group::Ad
    } else {
        Group::Nc
    };
    let surface = generate_surface(cfg, group, subject_seed(cfg.seed, index))?;
    let nodes = aggregate_patches(&surface, cfg)?;
    let thickness: Vec<f64> = nodes.iter().map(|n| n.thickness).collect();
    let adjacency = edge_weights(&thickness, cfg.sigma_t)?;
    let features = nodes.iter().flat_map(|n| n.position).collect();
    let graph = BrainGraph::new(
        format!("SYN-{index:04}"),
        group.label(),
        cfg.nodes_target,
        features,
        adjacency,
    )?;
    Ok((graph, surface.meta))
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<GraphDataset> {
    cfg.validate()?;
    let graphs = (0..cfg.n_ad + cfg.n_nc)
        .into_par_iter()
        .map(|i| {
            let (g, _) = generate_subject(cfg, i)?;
            g.ensure_valid()?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    GraphDataset::new(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GenConfig {
        GenConfig {
            nodes_target: 24,
            vertices_per_node: 10,
            n_ad: 3,
            n_nc: 2,
            n_regions: 8,
            ..GenConfig::default()
        }
    }

    #[test]
    fn group_rule() {
        assert_eq!(assign_group(0.0, 28).unwrap(), Assignment::Group(Group::Nc));
        assert_eq!(assign_group(1.0, 20).unwrap(), Assignment::Group(Group::Ad));
        assert_eq!(assign_group(0.0, 22).unwrap(), Assignment::Indeterminate);
        assert_eq!(assign_group(0.5, 24).unwrap(), Assignment::Group(Group::Ad));
        assert_eq!(assign_group(0.5, 26).unwrap(), Assignment::Indeterminate);
        assert!(matches!(assign_group(-0.5, 20), Err(Error::Domain(_))));
        assert!(matches!(assign_group(0.0, 31), Err(Error::Domain(_))));
    }

    #[test]
    fn sampled_metadata_matches_group() {
        let cfg = tiny();
        for seed in 0..20 {
            for group in [Group::Nc, Group::Ad] {
                let s = generate_surface(&cfg, group, seed).unwrap();
                assert_eq!(
                    assign_group(s.meta.cdr, s.meta.mmse).unwrap(),
                    Assignment::Group(group)
                );
                assert_eq!((s.meta.cdr * 2.0).fract(), 0.0);
            }
        }
    }

    #[test]
    fn surface_is_deterministic_and_positive() {
        let cfg = tiny();
        let a = generate_surface(&cfg, Group::Ad, 42).unwrap();
        let b = generate_surface(&cfg, Group::Ad, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vertices.len(), 240);
        assert!(a.vertices.iter().all(|v| v.thickness > 0.0));
        let r = a.vertices[0]
            .position
            .iter()
            .map(|c| c * c)
            .sum::<f64>()
            .sqrt();
        assert!((r - CORTEX_RADIUS_MM).abs() < 1e-9);
    }

    #[test]
    fn no_thinning_makes_groups_identical() {
        let cfg = GenConfig {
            thinning_factor: 1.0,
            ..tiny()
        };
        let ad = generate_surface(&cfg, Group::Ad, 9).unwrap();
        let nc = generate_surface(&cfg, Group::Nc, 9).unwrap();
        assert_eq!(ad.vertices, nc.vertices);
    }

    #[test]
    fn thinning_lowers_affected_region() {
        let cfg = GenConfig {
            thinning_factor: 0.8,
            ..tiny()
        };
        let affected = cfg.affected_regions();
        let mean = |s: &SurfaceModel| {
            let t: Vec<f64> = s
                .vertices
                .iter()
                .filter(|v| v.region_id < affected)
                .map(|v| v.thickness)
                .collect();
            t.iter().sum::<f64>() / t.len() as f64
        };
        for seed in 0..5 {
            let ad = generate_surface(&cfg, Group::Ad, seed).unwrap();
            let nc = generate_surface(&cfg, Group::Nc, seed).unwrap();
            assert!(mean(&ad) < mean(&nc));
        }
    }

    #[test]
    fn patch_aggregation() {
        let cfg = GenConfig {
            nodes_target: 2,
            vertices_per_node: 2,
            n_regions: 2,
            ..GenConfig::default()
        };
        let v = |t: f64, r: usize, x: f64| Vertex {
            position: [x, 0.0, 0.0],
            thickness: t,
            region_id: r,
        };
        let s = SurfaceModel {
            // Deliberately out of region order.
            vertices: vec![
                v(2.0, 1, 4.0),
                v(1.0, 0, 1.0),
                v(2.0, 1, 6.0),
                v(3.0, 0, 3.0),
            ],
            meta: SubjectMeta {
                cdr: 0.0,
                mmse: 30,
                group: Group::Nc,
            },
        };
        let nodes = aggregate_patches(&s, &cfg).unwrap();
        assert_eq!(nodes.len(), 2);
        assert_eq!(nodes[0].thickness, 2.0);
        assert_eq!(nodes[1].thickness, 2.0);
        assert_eq!(nodes[0].position, [2.0, 0.0, 0.0]);
        assert_eq!(nodes[1].position, [5.0, 0.0, 0.0]);

        let mut odd = s.clone();
        odd.vertices.pop();
        assert!(matches!(
            aggregate_patches(&odd, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn constant_thickness_gives_constant_nodes() {
        let cfg = tiny();
        let mut s = generate_surface(&cfg, Group::Nc, 1).unwrap();
        s.vertices.iter_mut().for_each(|v| v.thickness = 2.5);
        let nodes = aggregate_patches(&s, &cfg).unwrap();
        assert_eq!(nodes.len(), cfg.nodes_target);
        assert!(nodes.iter().all(|n| n.thickness == 2.5));
    }

    #[test]
    fn full_scale_vertex_budget() {
        let cfg = GenConfig {
            n_ad: 1,
            n_nc: 0,
            ..GenConfig::default()
        };
        let s = generate_surface(&cfg, Group::Ad, 3).unwrap();
        assert_eq!(s.vertices.len(), 290_500);
        assert_eq!(aggregate_patches(&s, &cfg).unwrap().len(), 1162);
    }

    #[test]
    fn kernel_values() {
        let w = edge_weights(&[2.0, 2.0, 2.5, 3.5], 0.5).unwrap();
        assert_eq!(w[1], 1.0);
        assert!((w[2] - (-1f64).exp()).abs() < 1e-15);
        assert!((w[2] - 0.3679).abs() < 1e-4);
        assert!(w[3] < w[2]);
        assert!((0..4).all(|i| w[i * 4 + i] == 0.0));
        assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(matches!(
            edge_weights(&[1.0, 2.0], 0.0),
            Err(Error::Config(_))
        ));
        assert!(edge_weights(&[1.0, -2.0], 0.5).is_err());
    }

    #[test]
    fn dataset_labels_and_validity() {
        let cfg = tiny();
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.count_label(1), 3);
        assert_eq!(ds.count_label(0), 2);
        assert!(ds.graphs.iter().all(|g| g.validate().is_empty()));
        assert!(ds.graphs.iter().all(|g| g.edge_count() == 24 * 23 / 2));

        let none = GenConfig { n_ad: 0, ..tiny() };
        assert!(generate_dataset(&none)
            .unwrap()
            .labels()
            .iter()
            .all(|&y| y == 0));
        assert_eq!(generate_dataset(&cfg).unwrap(), ds);
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig::default().validate().is_ok());
        assert!(GenConfig {
            sigma_t: 0.0,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            thinning_factor: 0.0,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            affected_fraction: 1.5,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            vertices_per_node: 0,
            ..tiny()
        }
        .validate()
        .is_err());
    }
}
